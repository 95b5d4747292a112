//! UJIIndoorLoc ingest, normalization, client partitions and domain scenarios.
//!
//! Records are shared behind `Arc` so that filtered sets, client shards and
//! scenario splits are cheap views over one loaded corpus. Every record keeps
//! the file and line it came from ([`RecordId`]); disjointness and coverage
//! checks compare those ids.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, stream};

pub const WAP_COUNT: usize = 520;
pub const COLUMN_COUNT: usize = WAP_COUNT + 9;
/// RSS value the corpus uses for "access point not detected".
pub const NOT_DETECTED: i16 = 100;
pub const MIN_RSS_DBM: i16 = -110;
pub const MAX_FLOOR: u8 = 4;
pub const MAX_BUILDING: u8 = 2;
pub const DEFAULT_RSS_FLOOR: f64 = -105.0;

const TRAILING_COLUMNS: [&str; 9] = [
    "LONGITUDE",
    "LATITUDE",
    "FLOOR",
    "BUILDINGID",
    "SPACEID",
    "RELATIVEPOSITION",
    "USERID",
    "PHONEID",
    "TIMESTAMP",
];

/// Column header of a UJIIndoorLoc CSV file.
pub fn header() -> Vec<String> {
    (1..=WAP_COUNT)
        .map(|i| format!("WAP{i:03}"))
        .chain(TRAILING_COLUMNS.iter().map(|s| s.to_string()))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Training,
    Validation,
    Derived,
}

/// Identity of a record: the file it was read from and its line number.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RecordId {
    pub file: Provenance,
    pub line: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FingerprintRecord {
    pub id: RecordId,
    pub rss: Box<[i16; WAP_COUNT]>,
    pub longitude: f64,
    pub latitude: f64,
    pub floor: u8,
    pub building_id: u8,
    pub space_id: u32,
    pub relative_position: u8,
    pub user_id: u32,
    pub phone_id: u32,
    pub timestamp: i64,
}

impl FingerprintRecord {
    pub fn position(&self) -> [f64; 2] {
        [self.longitude, self.latitude]
    }
}

/// An ordered collection of records.
///
/// `description` records how a derived set was produced (filters, seeds,
/// ratios) so it can be rebuilt.
#[derive(Clone, Debug)]
pub struct FingerprintSet {
    pub provenance: Provenance,
    pub description: String,
    records: Vec<Arc<FingerprintRecord>>,
}

impl FingerprintSet {
    pub fn new(provenance: Provenance, description: impl Into<String>, records: Vec<Arc<FingerprintRecord>>) -> Self {
        FingerprintSet {
            provenance,
            description: description.into(),
            records,
        }
    }

    fn derived(&self, description: String, records: Vec<Arc<FingerprintRecord>>) -> Self {
        FingerprintSet::new(Provenance::Derived, description, records)
    }

    pub fn records(&self) -> &[Arc<FingerprintRecord>] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &FingerprintRecord> {
        self.records.iter().map(|r| r.as_ref())
    }

    pub fn ids(&self) -> Vec<RecordId> {
        self.iter().map(|r| r.id).collect()
    }

    /// Sorted distinct floor values.
    pub fn floors(&self) -> Vec<u8> {
        self.iter()
            .map(|r| r.floor)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn phone_counts(&self) -> BTreeMap<u32, usize> {
        let mut counts = BTreeMap::new();
        for r in self.iter() {
            *counts.entry(r.phone_id).or_insert(0) += 1;
        }
        counts
    }

    pub fn select(&self, description: String, pred: impl Fn(&FingerprintRecord) -> bool) -> Self {
        let records = self.records.iter().filter(|r| pred(r)).cloned().collect();
        self.derived(description, records)
    }

    /// Concatenation, keeping order: `self` first.
    pub fn concat(&self, other: &FingerprintSet) -> Self {
        let mut records = self.records.clone();
        records.extend(other.records.iter().cloned());
        self.derived(format!("({}) + ({})", self.description, other.description), records)
    }

    pub fn timestamp_median(&self) -> Option<f64> {
        let mut ts: Vec<i64> = self.iter().map(|r| r.timestamp).collect();
        if ts.is_empty() {
            return None;
        }
        ts.sort_unstable();
        let n = ts.len();
        Some(if n % 2 == 1 {
            ts[n / 2] as f64
        } else {
            (ts[n / 2 - 1] as f64 + ts[n / 2] as f64) / 2.0
        })
    }
}

fn parse_field<T: std::str::FromStr>(raw: &str, column: &str, path: &Path, line: u64) -> Result<T> {
    raw.trim().parse::<T>().map_err(|_| Error::MalformedRow {
        path: path.to_path_buf(),
        line,
        message: format!("column {column}: cannot parse {raw:?}"),
    })
}

fn parse_integer(raw: &str, column: &str, path: &Path, line: u64) -> Result<i64> {
    // Some exports write integer columns as "1.0".
    let v: f64 = parse_field(raw, column, path, line)?;
    if v.fract() != 0.0 || !v.is_finite() {
        return Err(Error::MalformedRow {
            path: path.to_path_buf(),
            line,
            message: format!("column {column}: expected an integer, got {raw:?}"),
        });
    }
    Ok(v as i64)
}

/// Load a UJIIndoorLoc CSV (`trainingData.csv` / `validationData.csv`).
///
/// The header must match the 529 documented column names. Every row is
/// range-checked; the first offending row aborts the load with its line
/// number.
pub fn load_csv(path: impl AsRef<Path>, provenance: Provenance) -> Result<FingerprintSet> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Schema {
                path: path.to_path_buf(),
                message: format!("{other:?}"),
            },
        })?;

    let expected = header();
    let found = reader.headers().map_err(|e| Error::Schema {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let found: Vec<&str> = found.iter().map(|h| h.trim().trim_matches('"')).collect();
    if found.len() != COLUMN_COUNT {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            message: format!("header has {} columns, expected {COLUMN_COUNT}", found.len()),
        });
    }
    if let Some((i, (f, e))) = found
        .iter()
        .zip(expected.iter())
        .enumerate()
        .find(|(_, (f, e))| *f != e)
    {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            message: format!("header column {} is {f:?}, expected {e:?}", i + 1),
        });
    }

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::MalformedRow {
                path: path.to_path_buf(),
                line,
                message: e.to_string(),
            }
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let bad = |message: String| Error::MalformedRow {
            path: path.to_path_buf(),
            line,
            message,
        };
        if row.len() != COLUMN_COUNT {
            return Err(bad(format!("row has {} columns, expected {COLUMN_COUNT}", row.len())));
        }

        let mut rss = Box::new([0i16; WAP_COUNT]);
        for (i, slot) in rss.iter_mut().enumerate() {
            let v = parse_integer(&row[i], &expected[i], path, line)?;
            if v != NOT_DETECTED as i64 && !(MIN_RSS_DBM as i64..=0).contains(&v) {
                return Err(bad(format!("{}: RSS {v} out of range", expected[i])));
            }
            *slot = v as i16;
        }
        let col = |k: usize| &row[WAP_COUNT + k];
        let name = |k: usize| TRAILING_COLUMNS[k];
        let longitude: f64 = parse_field(col(0), name(0), path, line)?;
        let latitude: f64 = parse_field(col(1), name(1), path, line)?;
        if !longitude.is_finite() || !latitude.is_finite() {
            return Err(bad("non-finite coordinate".into()));
        }
        let floor = parse_integer(col(2), name(2), path, line)?;
        if !(0..=MAX_FLOOR as i64).contains(&floor) {
            return Err(bad(format!("FLOOR {floor} out of range [0, {MAX_FLOOR}]")));
        }
        let building = parse_integer(col(3), name(3), path, line)?;
        if !(0..=MAX_BUILDING as i64).contains(&building) {
            return Err(bad(format!("BUILDINGID {building} out of range [0, {MAX_BUILDING}]")));
        }
        let nonneg = |k: usize| -> Result<i64> {
            let v = parse_integer(col(k), name(k), path, line)?;
            if v < 0 {
                return Err(bad(format!("{} {v} is negative", name(k))));
            }
            Ok(v)
        };
        let space_id = nonneg(4)?;
        let relative_position = nonneg(5)?;
        let user_id = nonneg(6)?;
        let phone_id = nonneg(7)?;
        let timestamp = nonneg(8)?;
        if relative_position > u8::MAX as i64 {
            return Err(bad(format!("RELATIVEPOSITION {relative_position} too large")));
        }

        records.push(Arc::new(FingerprintRecord {
            id: RecordId { file: provenance, line },
            rss,
            longitude,
            latitude,
            floor: floor as u8,
            building_id: building as u8,
            space_id: space_id as u32,
            relative_position: relative_position as u8,
            user_id: user_id as u32,
            phone_id: phone_id as u32,
            timestamp,
        }));
    }

    Ok(FingerprintSet::new(provenance, path.display().to_string(), records))
}

/// Write records in UJIIndoorLoc CSV layout (header plus one row per record).
pub fn write_csv(set: &FingerprintSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let map_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Schema {
            path: path.to_path_buf(),
            message: format!("{other:?}"),
        },
    };
    let mut w = csv::Writer::from_path(path).map_err(map_err)?;
    w.write_record(header()).map_err(map_err)?;
    let mut fields: Vec<String> = Vec::with_capacity(COLUMN_COUNT);
    for r in set.iter() {
        fields.clear();
        fields.extend(r.rss.iter().map(|v| v.to_string()));
        fields.push(format!("{}", r.longitude));
        fields.push(format!("{}", r.latitude));
        fields.push(r.floor.to_string());
        fields.push(r.building_id.to_string());
        fields.push(r.space_id.to_string());
        fields.push(r.relative_position.to_string());
        fields.push(r.user_id.to_string());
        fields.push(r.phone_id.to_string());
        fields.push(r.timestamp.to_string());
        w.write_record(&fields).map_err(map_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Keep records matching every supplied predicate, preserving order.
pub fn filter(set: &FingerprintSet, building: Option<u8>, floor: Option<u8>) -> FingerprintSet {
    let mut desc = format!("filter({}", set.description);
    if let Some(b) = building {
        desc.push_str(&format!(", building={b}"));
    }
    if let Some(f) = floor {
        desc.push_str(&format!(", floor={f}"));
    }
    desc.push(')');
    set.select(desc, |r| {
        building.is_none_or(|b| r.building_id == b) && floor.is_none_or(|f| r.floor == f)
    })
}

/// Feature scaling and target normalization fitted on training data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub rss_floor: f64,
    pub target_offsets: [f64; 2],
    pub target_scales: [f64; 2],
}

impl Default for NormalizationSpec {
    fn default() -> Self {
        NormalizationSpec {
            rss_floor: DEFAULT_RSS_FLOOR,
            target_offsets: [0.0, 0.0],
            target_scales: [1.0, 1.0],
        }
    }
}

/// Map a raw reading to `[0, 1]`: undetected is 0, `rss_floor` is 0, 0 dBm is 1.
pub fn normalize_rss(raw: i16, spec: &NormalizationSpec) -> f64 {
    if raw == NOT_DETECTED {
        return 0.0;
    }
    let floor = spec.rss_floor;
    let clamped = (raw as f64).clamp(floor, 0.0);
    (clamped - floor) / -floor
}

/// Offsets are per-coordinate minima, scales per-coordinate ranges (1 when
/// the range is zero). Panics on an empty set.
pub fn fit_target_normalization(train: &FingerprintSet) -> NormalizationSpec {
    assert!(!train.is_empty(), "cannot fit normalization on an empty set");
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for r in train.iter() {
        for (k, v) in r.position().into_iter().enumerate() {
            lo[k] = lo[k].min(v);
            hi[k] = hi[k].max(v);
        }
    }
    let scale = |k: usize| {
        let range = hi[k] - lo[k];
        if range > 0.0 {
            range
        } else {
            1.0
        }
    };
    NormalizationSpec {
        rss_floor: DEFAULT_RSS_FLOOR,
        target_offsets: lo,
        target_scales: [scale(0), scale(1)],
    }
}

impl NormalizationSpec {
    pub fn normalize_target(&self, p: [f64; 2]) -> [f64; 2] {
        [
            (p[0] - self.target_offsets[0]) / self.target_scales[0],
            (p[1] - self.target_offsets[1]) / self.target_scales[1],
        ]
    }

    pub fn denormalize_target(&self, q: [f64; 2]) -> [f64; 2] {
        [
            q[0] * self.target_scales[0] + self.target_offsets[0],
            q[1] * self.target_scales[1] + self.target_offsets[1],
        ]
    }

    /// Row-major `len × 520` feature matrix.
    pub fn encode_features(&self, set: &FingerprintSet) -> Vec<f64> {
        let mut out = Vec::with_capacity(set.len() * WAP_COUNT);
        for r in set.iter() {
            out.extend(r.rss.iter().map(|&v| normalize_rss(v, self)));
        }
        out
    }

    /// Row-major `len × 2` normalized position matrix.
    pub fn encode_targets(&self, set: &FingerprintSet) -> Vec<f64> {
        set.iter().flat_map(|r| self.normalize_target(r.position())).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionAxis {
    ByPhone,
    ByFloor,
    UniformRandom,
}

/// Client id → local fingerprint database.
///
/// `groups` maps each client to the phone id (by phone) or floor (by floor)
/// that defines it.
#[derive(Clone, Debug)]
pub struct ClientAssignment {
    pub axis: PartitionAxis,
    pub clients: BTreeMap<u32, FingerprintSet>,
    pub groups: BTreeMap<u32, u32>,
}

impl ClientAssignment {
    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    pub fn total_records(&self) -> usize {
        self.clients.values().map(FingerprintSet::len).sum()
    }

    /// All records, clients in ascending id order.
    pub fn union(&self) -> FingerprintSet {
        let records = self
            .clients
            .values()
            .flat_map(|s| s.records().iter().cloned())
            .collect();
        FingerprintSet::new(Provenance::Derived, "union of clients", records)
    }

    pub fn client_for_group(&self, group: u32) -> Option<u32> {
        self.groups.iter().find(|(_, &g)| g == group).map(|(&c, _)| c)
    }
}

/// One client per phone, for the `n_clients` phones with the most records
/// (ties to the smaller phone id). Client `i` owns the `i`-th selected phone.
pub fn partition_by_phone(set: &FingerprintSet, n_clients: usize) -> Result<ClientAssignment> {
    if n_clients == 0 {
        return Err(Error::invalid("n_clients must be positive"));
    }
    let mut counts: Vec<(u32, usize)> = set.phone_counts().into_iter().collect();
    if counts.len() < n_clients {
        return Err(Error::invalid(format!(
            "{} distinct phones, {n_clients} clients requested",
            counts.len()
        )));
    }
    counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut clients = BTreeMap::new();
    let mut groups = BTreeMap::new();
    for (i, &(phone, _)) in counts.iter().take(n_clients).enumerate() {
        let id = i as u32;
        clients.insert(
            id,
            set.select(format!("{} | phone={phone}", set.description), |r| r.phone_id == phone),
        );
        groups.insert(id, phone);
    }
    Ok(ClientAssignment {
        axis: PartitionAxis::ByPhone,
        clients,
        groups,
    })
}

fn split_contiguous(records: &[Arc<FingerprintRecord>], parts: usize) -> Vec<Vec<Arc<FingerprintRecord>>> {
    let base = records.len() / parts;
    let extra = records.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for i in 0..parts {
        let size = base + usize::from(i < extra);
        out.push(records[start..start + size].to_vec());
        start += size;
    }
    out
}

fn shuffled(set: &FingerprintSet, seed: u64, path: &[u64]) -> Vec<Arc<FingerprintRecord>> {
    let mut records = set.records().to_vec();
    records.shuffle(&mut seed::rng(seed, path));
    records
}

/// Per floor, a seeded shuffle split into `clients_per_floor` near-equal
/// single-floor clients. Client ids run floor-major in ascending floor order.
pub fn partition_by_floor(set: &FingerprintSet, clients_per_floor: usize, seed: u64) -> Result<ClientAssignment> {
    if clients_per_floor == 0 {
        return Err(Error::invalid("clients_per_floor must be positive"));
    }
    let floors = set.floors();
    if floors.is_empty() {
        return Err(Error::invalid("cannot partition an empty set by floor"));
    }
    let mut clients = BTreeMap::new();
    let mut groups = BTreeMap::new();
    for (fi, &floor) in floors.iter().enumerate() {
        let on_floor = set.select(format!("{} | floor={floor}", set.description), |r| r.floor == floor);
        if on_floor.len() < clients_per_floor {
            return Err(Error::invalid(format!(
                "floor {floor} has {} records, fewer than {clients_per_floor} clients",
                on_floor.len()
            )));
        }
        let records = shuffled(&on_floor, seed, &[stream::PARTITION, floor as u64]);
        for (j, part) in split_contiguous(&records, clients_per_floor).into_iter().enumerate() {
            let id = (fi * clients_per_floor + j) as u32;
            let desc = format!(
                "{} | floor={floor} shard {j}/{clients_per_floor} seed={seed}",
                set.description
            );
            clients.insert(id, FingerprintSet::new(Provenance::Derived, desc, part));
            groups.insert(id, floor as u32);
        }
    }
    Ok(ClientAssignment {
        axis: PartitionAxis::ByFloor,
        clients,
        groups,
    })
}

/// Seeded shuffle, then a contiguous split whose sizes differ by at most one.
pub fn partition_uniform(set: &FingerprintSet, n_clients: usize, seed: u64) -> Result<ClientAssignment> {
    if n_clients == 0 || n_clients > set.len() {
        return Err(Error::invalid(format!(
            "cannot split {} records among {n_clients} clients",
            set.len()
        )));
    }
    let records = shuffled(set, seed, &[stream::PARTITION]);
    let clients = split_contiguous(&records, n_clients)
        .into_iter()
        .enumerate()
        .map(|(i, part)| {
            let desc = format!("{} | uniform shard {i}/{n_clients} seed={seed}", set.description);
            (i as u32, FingerprintSet::new(Provenance::Derived, desc, part))
        })
        .collect();
    Ok(ClientAssignment {
        axis: PartitionAxis::UniformRandom,
        clients,
        groups: BTreeMap::new(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Device,
    Time,
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScenarioKind::Device => "device",
            ScenarioKind::Time => "time",
        })
    }
}

/// Source federation, target federation and target-domain holdout.
///
/// The target domain's records are split once, independently of the target
/// ratio, into a holdout and a trainable pool. The target federation trains
/// on the first `round(ratio · |pool|)` records of a seeded permutation of
/// the pool, so grids over the ratio see nested training sets and one fixed
/// holdout.
#[derive(Clone, Debug)]
pub struct DomainScenario {
    pub kind: ScenarioKind,
    pub source: ClientAssignment,
    pub target: ClientAssignment,
    pub target_ratio: f64,
    pub target_pool: FingerprintSet,
    pub holdout: FingerprintSet,
    pub description: String,
}

impl DomainScenario {
    pub fn target_trainable(&self) -> FingerprintSet {
        self.target.union()
    }
}

/// Knobs shared by both scenario builders.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScenarioOptions {
    /// Fraction of the target domain carved off as holdout before subsampling.
    pub holdout_fraction: f64,
    pub seed: u64,
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid(format!("target ratio {ratio} outside (0, 1]")));
    }
    Ok(())
}

fn carve_holdout(
    domain: &FingerprintSet,
    opts: &ScenarioOptions,
    tag: u64,
) -> Result<(FingerprintSet, FingerprintSet)> {
    if !(0.0..1.0).contains(&opts.holdout_fraction) {
        return Err(Error::invalid(format!(
            "holdout fraction {} outside [0, 1)",
            opts.holdout_fraction
        )));
    }
    let records = shuffled(domain, opts.seed, &[stream::HOLDOUT, tag]);
    let n_hold = (opts.holdout_fraction * records.len() as f64).round() as usize;
    let n_hold = n_hold.min(records.len().saturating_sub(1));
    let (hold, pool) = records.split_at(n_hold);
    let mut hold = hold.to_vec();
    let mut pool = pool.to_vec();
    // Back to corpus order; the split itself is what the seed decides.
    hold.sort_by_key(|r| r.id);
    pool.sort_by_key(|r| r.id);
    let desc = |part: &str| {
        format!(
            "{} | {part} holdout_fraction={} seed={}",
            domain.description, opts.holdout_fraction, opts.seed
        )
    };
    Ok((
        FingerprintSet::new(Provenance::Derived, desc("holdout"), hold),
        FingerprintSet::new(Provenance::Derived, desc("pool"), pool),
    ))
}

fn subsample(pool: &FingerprintSet, ratio: f64, seed: u64, tag: u64) -> FingerprintSet {
    let records = shuffled(pool, seed, &[stream::SUBSAMPLE, tag]);
    let k = ((ratio * records.len() as f64).round() as usize).clamp(1, records.len());
    let mut kept = records[..k].to_vec();
    kept.sort_by_key(|r| r.id);
    FingerprintSet::new(
        Provenance::Derived,
        format!("{} | subsample ratio={ratio} seed={seed}", pool.description),
        kept,
    )
}

/// Measurement-heterogeneity scenario.
///
/// Source: the `n_clients` largest phones, one client each. Target: the
/// `target_phones` (each must be a selected phone). Each target phone's
/// records are split into holdout and pool; the pool stays in the phone's
/// source client (the target device takes part in global training) and its
/// `ratio` subsample forms the target federation. `extra_holdout` rows of the
/// target phones (for example the validation file) are appended to the
/// holdout.
pub fn build_device_scenario(
    set: &FingerprintSet,
    target_phones: &[u32],
    n_clients: usize,
    ratio: f64,
    opts: &ScenarioOptions,
    extra_holdout: Option<&FingerprintSet>,
) -> Result<DomainScenario> {
    check_ratio(ratio)?;
    if target_phones.is_empty() {
        return Err(Error::invalid("no target phone given"));
    }
    let mut source = partition_by_phone(set, n_clients)?;
    let mut target_clients = BTreeMap::new();
    let mut target_groups = BTreeMap::new();
    let mut holdout_records = Vec::new();
    let mut pool_records = Vec::new();
    for &phone in target_phones {
        let client = source.client_for_group(phone).ok_or_else(|| {
            Error::invalid(format!(
                "target phone {phone} is not among the {n_clients} selected phones"
            ))
        })?;
        let (hold, pool) = carve_holdout(&source.clients[&client], opts, phone as u64)?;
        let trainable = subsample(&pool, ratio, opts.seed, phone as u64);
        holdout_records.extend(hold.records().iter().cloned());
        pool_records.extend(pool.records().iter().cloned());
        source.clients.insert(client, pool);
        target_clients.insert(client, trainable);
        target_groups.insert(client, phone);
    }
    if let Some(extra) = extra_holdout {
        holdout_records.extend(
            extra
                .records()
                .iter()
                .filter(|r| target_phones.contains(&r.phone_id))
                .cloned(),
        );
    }
    let description = format!(
        "device scenario over ({}) target_phones={target_phones:?} n_clients={n_clients} ratio={ratio} seed={}",
        set.description, opts.seed
    );
    Ok(DomainScenario {
        kind: ScenarioKind::Device,
        source,
        target: ClientAssignment {
            axis: PartitionAxis::ByPhone,
            clients: target_clients,
            groups: target_groups,
        },
        target_ratio: ratio,
        target_pool: FingerprintSet::new(Provenance::Derived, "target pool", pool_records),
        holdout: FingerprintSet::new(Provenance::Derived, "target holdout", holdout_records),
        description,
    })
}

/// Environmental-variation scenario split at `split_time`.
///
/// Source: records before the split, `n_clients` phone clients. Target:
/// records at or after the split, holdout carved off, the ratio subsample of
/// the pool federated with one client per phone present.
pub fn build_time_scenario(
    set: &FingerprintSet,
    split_time: i64,
    n_clients: usize,
    ratio: f64,
    opts: &ScenarioOptions,
) -> Result<DomainScenario> {
    check_ratio(ratio)?;
    let before = set.select(format!("{} | timestamp<{split_time}", set.description), |r| {
        r.timestamp < split_time
    });
    let after = set.select(format!("{} | timestamp>={split_time}", set.description), |r| {
        r.timestamp >= split_time
    });
    if before.is_empty() || after.is_empty() {
        return Err(Error::invalid(format!(
            "split time {split_time} leaves {} source and {} target records",
            before.len(),
            after.len()
        )));
    }
    let source = partition_by_phone(&before, n_clients)?;
    let (holdout, pool) = carve_holdout(&after, opts, 0)?;
    let trainable = subsample(&pool, ratio, opts.seed, 0);
    let phones = trainable.phone_counts().len();
    let target = partition_by_phone(&trainable, phones)?;
    let description = format!(
        "time scenario over ({}) split_time={split_time} n_clients={n_clients} ratio={ratio} seed={}",
        set.description, opts.seed
    );
    Ok(DomainScenario {
        kind: ScenarioKind::Time,
        source,
        target,
        target_ratio: ratio,
        target_pool: pool,
        holdout,
        description,
    })
}

/// Midpoint of the widest gap between consecutive distinct timestamps:
/// the boundary between two survey campaigns.
pub fn suggest_split_time(set: &FingerprintSet) -> Option<i64> {
    let ts: BTreeSet<i64> = set.iter().map(|r| r.timestamp).collect();
    let ts: Vec<i64> = ts.into_iter().collect();
    ts.windows(2)
        .max_by_key(|w| (w[1] - w[0], std::cmp::Reverse(w[0])))
        .map(|w| w[0] + (w[1] - w[0]) / 2 + 1)
}

/// Days between the median timestamps of two sets.
pub fn median_gap_days(earlier: &FingerprintSet, later: &FingerprintSet) -> Option<f64> {
    Some((later.timestamp_median()? - earlier.timestamp_median()?) / 86_400.0)
}

/// Locate `trainingData.csv` and `validationData.csv` under a dataset root.
pub fn corpus_paths(root: &Path) -> (PathBuf, PathBuf) {
    (root.join("trainingData.csv"), root.join("validationData.csv"))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn record(line: u64, phone: u32, floor: u8, pos: [f64; 2], ts: i64) -> Arc<FingerprintRecord> {
        Arc::new(FingerprintRecord {
            id: RecordId {
                file: Provenance::Training,
                line,
            },
            rss: Box::new([NOT_DETECTED; WAP_COUNT]),
            longitude: pos[0],
            latitude: pos[1],
            floor,
            building_id: 1,
            space_id: 0,
            relative_position: 1,
            user_id: 1,
            phone_id: phone,
            timestamp: ts,
        })
    }

    fn set_of(records: Vec<Arc<FingerprintRecord>>) -> FingerprintSet {
        FingerprintSet::new(Provenance::Training, "test", records)
    }

    fn assert_partition(parent: &FingerprintSet, a: &ClientAssignment) {
        let mut union: Vec<RecordId> = a.union().ids();
        union.sort();
        let distinct: BTreeSet<RecordId> = union.iter().copied().collect();
        assert_eq!(distinct.len(), union.len(), "client sets overlap");
        let mut parent_ids = parent.ids();
        parent_ids.sort();
        assert_eq!(union, parent_ids);
    }

    #[test]
    fn normalize_rss_endpoints() {
        let spec = NormalizationSpec::default();
        assert_eq!(normalize_rss(NOT_DETECTED, &spec), 0.0);
        assert_eq!(normalize_rss(0, &spec), 1.0);
        assert_eq!(normalize_rss(-105, &spec), 0.0);
        assert_eq!(normalize_rss(-110, &spec), 0.0);
        assert!((normalize_rss(-42, &spec) - 63.0 / 105.0).abs() < 1e-15);
    }

    #[test]
    fn normalize_rss_is_monotone() {
        let spec = NormalizationSpec::default();
        let values: Vec<f64> = (-110..=0).map(|v| normalize_rss(v, &spec)).collect();
        assert!(values.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn target_normalization_fits_ranges() {
        let one = set_of(vec![record(2, 0, 0, [10.0, 20.0], 0)]);
        let spec = fit_target_normalization(&one);
        assert_eq!(spec.target_offsets, [10.0, 20.0]);
        assert_eq!(spec.target_scales, [1.0, 1.0]);

        let two = set_of(vec![record(2, 0, 0, [0.0, 0.0], 0), record(3, 0, 0, [100.0, 50.0], 0)]);
        let spec = fit_target_normalization(&two);
        assert_eq!(spec.target_offsets, [0.0, 0.0]);
        assert_eq!(spec.target_scales, [100.0, 50.0]);
        for r in two.iter() {
            let q = spec.normalize_target(r.position());
            assert!(q.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn partition_by_phone_takes_largest() {
        let mut records = Vec::new();
        let mut line = 2;
        for (phone, n) in [(5u32, 100usize), (7, 50), (9, 10)] {
            for _ in 0..n {
                records.push(record(line, phone, 0, [0.0, 0.0], 0));
                line += 1;
            }
        }
        let set = set_of(records);
        let a = partition_by_phone(&set, 2).unwrap();
        assert_eq!(a.groups, BTreeMap::from([(0, 5), (1, 7)]));
        assert_eq!(a.clients[&0].len(), 100);
        assert_eq!(a.clients[&1].len(), 50);
        assert!(partition_by_phone(&set, 4).is_err());
    }

    #[test]
    fn partition_by_phone_breaks_ties_by_smaller_id() {
        let set = set_of(vec![record(2, 9, 0, [0.0, 0.0], 0), record(3, 3, 0, [0.0, 0.0], 0)]);
        let a = partition_by_phone(&set, 1).unwrap();
        assert_eq!(a.groups[&0], 3);
    }

    #[test]
    fn uniform_sizes_and_determinism() {
        let set = set_of((0..10).map(|i| record(i + 2, 0, 0, [0.0, 0.0], 0)).collect());
        let a = partition_uniform(&set, 3, 11).unwrap();
        let sizes: Vec<usize> = a.clients.values().map(|s| s.len()).collect();
        assert_eq!(sizes, vec![4, 3, 3]);
        assert_partition(&set, &a);
        let b = partition_uniform(&set, 3, 11).unwrap();
        for (x, y) in a.clients.values().zip(b.clients.values()) {
            assert_eq!(x.ids(), y.ids());
        }
        assert!(partition_uniform(&set, 11, 0).is_err());
    }

    #[test]
    fn by_floor_clients_are_single_floor() {
        let set = set_of(
            (0..40)
                .map(|i| record(i + 2, 0, (i % 4) as u8, [0.0, 0.0], 0))
                .collect(),
        );
        let a = partition_by_floor(&set, 4, 3).unwrap();
        assert_eq!(a.len(), 16);
        assert_partition(&set, &a);
        for (id, s) in &a.clients {
            assert_eq!(s.floors(), vec![a.groups[id] as u8]);
        }
        let whole = partition_by_floor(&set, 1, 3).unwrap();
        assert_eq!(whole.len(), 4);
        assert!(whole.clients.values().all(|s| s.len() == 10));
        assert!(partition_by_floor(&set, 11, 3).is_err());
    }

    #[test]
    fn filter_unknown_building_is_empty() {
        let set = set_of(vec![record(2, 0, 0, [0.0, 0.0], 0)]);
        assert!(filter(&set, Some(99), None).is_empty());
        assert_eq!(filter(&set, Some(1), Some(0)).len(), 1);
    }

    fn phone_corpus() -> FingerprintSet {
        let mut records = Vec::new();
        let mut line = 2;
        for phone in 0..4u32 {
            for i in 0..(40 - phone as i64 * 5) {
                records.push(record(
                    line,
                    phone,
                    0,
                    [i as f64, 0.0],
                    if i < 20 { 100 } else { 5_000_000 },
                ));
                line += 1;
            }
        }
        set_of(records)
    }

    #[test]
    fn device_scenario_properties() {
        let set = phone_corpus();
        let opts = ScenarioOptions {
            holdout_fraction: 0.25,
            seed: 4,
        };
        let full = build_device_scenario(&set, &[3], 4, 1.0, &opts, None).unwrap();
        let half = build_device_scenario(&set, &[3], 4, 0.5, &opts, None).unwrap();
        let client = full.source.client_for_group(3).unwrap();
        assert_eq!(full.target.clients[&client].ids(), full.target_pool.ids());
        assert_eq!(full.holdout.ids(), half.holdout.ids());
        let again = build_device_scenario(&set, &[3], 4, 0.5, &opts, None).unwrap();
        assert_eq!(half.target_trainable().ids(), again.target_trainable().ids());
        assert_eq!(half.target_trainable().len(), 10);

        let hold: BTreeSet<RecordId> = half.holdout.ids().into_iter().collect();
        assert!(half.target_trainable().ids().iter().all(|id| !hold.contains(id)));
        assert!(half.source.union().ids().iter().all(|id| !hold.contains(id)));
        assert!(build_device_scenario(&set, &[42], 4, 0.5, &opts, None).is_err());
        assert!(build_device_scenario(&set, &[3], 4, 1.5, &opts, None).is_err());
    }

    #[test]
    fn time_scenario_properties() {
        let set = phone_corpus();
        let opts = ScenarioOptions {
            holdout_fraction: 0.2,
            seed: 9,
        };
        let split = suggest_split_time(&set).unwrap();
        assert!(split > 100 && split <= 5_000_000);
        let s = build_time_scenario(&set, split, 4, 0.5, &opts).unwrap();
        let src: BTreeSet<RecordId> = s.source.union().ids().into_iter().collect();
        let hold: BTreeSet<RecordId> = s.holdout.ids().into_iter().collect();
        for id in s.target_trainable().ids() {
            assert!(!src.contains(&id) && !hold.contains(&id));
        }
        assert!(hold.iter().all(|id| !src.contains(id)));
        assert!(build_time_scenario(&set, 0, 4, 0.5, &opts).is_err());
        assert!(build_time_scenario(&set, i64::MAX, 4, 0.5, &opts).is_err());
    }
}

//! Seeded generator of UJIIndoorLoc-format corpora.
//!
//! Produces `trainingData.csv` / `validationData.csv` with the real corpus's
//! schema, row counts (19938 / 1111), three buildings (4, 4 and 5 floors),
//! 25 phones and 18 users. Signals follow a log-distance path-loss model with
//! floor attenuation and per-location shadowing, plus the two nuisance
//! factors the transfer experiments need:
//!
//! - device heterogeneity: each phone has its own gain, slope, sensitivity,
//!   noise level and, for some models, no 5 GHz radio;
//! - environmental drift: the training file holds two survey campaigns about
//!   30 days apart and the validation file a third one months later, each
//!   with per-AP power drift, relocated APs and APs switched off.
//!
//! It exists so the pipeline can be exercised where the public corpus is not
//! available. Results on it are not results on UJIIndoorLoc.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{self, FingerprintRecord, FingerprintSet, Provenance, RecordId, NOT_DETECTED, WAP_COUNT};
use crate::error::Result;
use crate::seed;

const DAY: i64 = 86_400;
/// 2013-05-30 00:00 UTC.
const FIRST_CAMPAIGN: i64 = 1_369_872_000;
const FLOOR_HEIGHT_M: f64 = 4.0;
const DRIFT_DB_SD: f64 = 5.0;
const MOVED_AP_FRACTION: f64 = 0.08;
const OFF_AP_FRACTION: f64 = 0.04;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub training_rows: usize,
    pub validation_rows: usize,
    /// Share of training rows in the first campaign.
    pub first_campaign_share: f64,
    /// Days between the first and second campaign.
    pub campaign_gap_days: i64,
    /// Per-campaign random walk of each AP's power, standard deviation in dB.
    pub drift_db_sd: f64,
    /// Per-campaign probability that an AP is relocated within its building.
    pub moved_ap_fraction: f64,
    /// Per-campaign probability that an AP is switched off for good.
    pub off_ap_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 2013,
            training_rows: 19_938,
            validation_rows: 1_111,
            first_campaign_share: 0.65,
            campaign_gap_days: 30,
            drift_db_sd: DRIFT_DB_SD,
            moved_ap_fraction: MOVED_AP_FRACTION,
            off_ap_fraction: OFF_AP_FRACTION,
        }
    }
}

struct Building {
    lon: (f64, f64),
    lat: (f64, f64),
    floors: u8,
    /// Training rows per floor, real-corpus proportions.
    floor_weights: &'static [f64],
    train_share: f64,
    validation_share: f64,
}

const BUILDINGS: [Building; 3] = [
    Building {
        lon: (-7691.0, -7560.0),
        lat: (4_864_900.0, 4_865_017.0),
        floors: 4,
        floor_weights: &[1059.0, 1356.0, 1443.0, 1391.0],
        train_share: 5249.0 / 19938.0,
        validation_share: 536.0 / 1111.0,
    },
    Building {
        lon: (-7580.0, -7400.0),
        lat: (4_864_820.0, 4_864_950.0),
        floors: 4,
        floor_weights: &[1368.0, 1484.0, 1396.0, 948.0],
        train_share: 5196.0 / 19938.0,
        validation_share: 307.0 / 1111.0,
    },
    Building {
        lon: (-7420.0, -7301.0),
        lat: (4_864_746.0, 4_864_880.0),
        floors: 5,
        floor_weights: &[1942.0, 2162.0, 1577.0, 2709.0, 1102.0],
        train_share: 9493.0 / 19938.0,
        validation_share: 268.0 / 1111.0,
    },
];

const PHONES: usize = 25;
const USERS: u32 = 18;

struct AccessPoint {
    building: usize,
    floor: u8,
    pos: [f64; 2],
    tx_dbm: f64,
    band_5ghz: bool,
}

struct Phone {
    gain_db: f64,
    slope: f64,
    sensitivity_dbm: f64,
    noise_db: f64,
    has_5ghz: bool,
}

/// Per-campaign changes relative to the original AP deployment.
struct Campaign {
    start: i64,
    span_days: i64,
    drift_db: Vec<f64>,
    moved_to: Vec<Option<[f64; 2]>>,
    off: Vec<bool>,
    /// Relative record weight per phone; zero means unused.
    phone_weights: Vec<f64>,
}

struct ReferencePoint {
    building: usize,
    floor: u8,
    space_id: u32,
    relative_position: u8,
    pos: [f64; 2],
}

struct World {
    aps: Vec<AccessPoint>,
    phones: Vec<Phone>,
    refs: Vec<ReferencePoint>,
    shadow_seed: u64,
}

fn uniform(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    rng.random_range(range.0..range.1)
}

fn build_world(cfg: &SynthConfig) -> World {
    let mut rng = seed::rng(cfg.seed, &[1]);
    let ap_split = [170usize, 170, 180];
    let mut aps = Vec::with_capacity(WAP_COUNT);
    for (b, &count) in ap_split.iter().enumerate() {
        let bld = &BUILDINGS[b];
        for _ in 0..count {
            aps.push(AccessPoint {
                building: b,
                floor: rng.random_range(0..bld.floors),
                pos: [uniform(&mut rng, bld.lon), uniform(&mut rng, bld.lat)],
                tx_dbm: uniform(&mut rng, (-42.0, -30.0)),
                band_5ghz: rng.random_bool(0.3),
            });
        }
    }
    // Interleave buildings across WAP columns as in the real corpus.
    aps.shuffle(&mut rng);

    let phones = (0..PHONES)
        .map(|_| Phone {
            gain_db: uniform(&mut rng, (-9.0, 9.0)),
            slope: uniform(&mut rng, (0.8, 1.2)),
            sensitivity_dbm: uniform(&mut rng, (-99.0, -90.0)),
            noise_db: uniform(&mut rng, (2.0, 4.0)),
            has_5ghz: rng.random_bool(0.6),
        })
        .collect();

    let mut refs = Vec::new();
    for (b, bld) in BUILDINGS.iter().enumerate() {
        for floor in 0..bld.floors {
            for space in 0..55u32 {
                let centre = [uniform(&mut rng, bld.lon), uniform(&mut rng, bld.lat)];
                for rel in 1..=2u8 {
                    let offset = if rel == 1 { 0.0 } else { 2.5 };
                    refs.push(ReferencePoint {
                        building: b,
                        floor,
                        space_id: 100 + space,
                        relative_position: rel,
                        pos: [
                            (centre[0] + offset).clamp(bld.lon.0, bld.lon.1),
                            (centre[1] - offset).clamp(bld.lat.0, bld.lat.1),
                        ],
                    });
                }
            }
        }
    }
    World {
        aps,
        phones,
        refs,
        shadow_seed: seed::derive(cfg.seed, &[2]),
    }
}

#[allow(clippy::too_many_arguments)]
fn campaign(
    cfg: &SynthConfig,
    world: &World,
    tag: u64,
    start: i64,
    drift_sd: f64,
    move_p: f64,
    off_p: f64,
    phone_ids: &[usize],
    previous: Option<&Campaign>,
) -> Campaign {
    let mut rng = seed::rng(cfg.seed, &[3, tag]);
    let normal = Normal::new(0.0, drift_sd).unwrap();
    let n = world.aps.len();
    let mut drift_db = previous.map(|p| p.drift_db.clone()).unwrap_or_else(|| vec![0.0; n]);
    let mut moved_to = previous.map(|p| p.moved_to.clone()).unwrap_or_else(|| vec![None; n]);
    let mut off = previous.map(|p| p.off.clone()).unwrap_or_else(|| vec![false; n]);
    for (i, ap) in world.aps.iter().enumerate() {
        if drift_sd > 0.0 {
            drift_db[i] += normal.sample(&mut rng);
        }
        if rng.random_bool(move_p) {
            let b = &BUILDINGS[ap.building];
            moved_to[i] = Some([uniform(&mut rng, b.lon), uniform(&mut rng, b.lat)]);
        }
        if rng.random_bool(off_p) {
            off[i] = true;
        }
    }
    let mut phone_weights = vec![0.0; PHONES];
    for (rank, &p) in phone_ids.iter().enumerate() {
        // Zipf-like spread of survey effort across devices.
        phone_weights[p] = 1.0 / (1.0 + rank as f64).powf(0.9);
    }
    Campaign {
        start,
        span_days: 10,
        drift_db,
        moved_to,
        off,
        phone_weights,
    }
}

fn shadowing(world: &World, ref_index: usize, ap: usize) -> f64 {
    // Fixed per (location, AP): a hash-seeded standard normal scaled to 5 dB.
    let h = seed::derive(world.shadow_seed, &[ref_index as u64, ap as u64]);
    let u1 = ((h >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
    let u2 = ((seed::derive(h, &[7]) >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
    5.0 * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn mean_rss(world: &World, camp: &Campaign, ref_index: usize, ap_index: usize) -> Option<f64> {
    if camp.off[ap_index] {
        return None;
    }
    let ap = &world.aps[ap_index];
    let rp = &world.refs[ref_index];
    let pos = camp.moved_to[ap_index].unwrap_or(ap.pos);
    let df = (ap.floor as f64 - rp.floor as f64).abs();
    let dx = pos[0] - rp.pos[0];
    let dy = pos[1] - rp.pos[1];
    let d = (dx * dx + dy * dy + (df * FLOOR_HEIGHT_M).powi(2)).sqrt().max(1.0);
    let mut rss = ap.tx_dbm - 30.0 * d.log10() - 14.0 * df;
    if ap.building != rp.building {
        rss -= 25.0;
    }
    Some(rss + shadowing(world, ref_index, ap_index) + camp.drift_db[ap_index])
}

#[allow(clippy::too_many_arguments)]
fn draw_records(
    world: &World,
    camp: &Campaign,
    rows: usize,
    shares: impl Fn(&Building) -> f64,
    provenance: Provenance,
    first_line: u64,
    rng: &mut ChaCha8Rng,
) -> Vec<FingerprintRecord> {
    let noise = Normal::new(0.0, 1.0).unwrap();
    let phone_total: f64 = camp.phone_weights.iter().sum();
    let mut out = Vec::with_capacity(rows);
    // Deterministic allocation of rows to (building, floor) by largest remainder.
    let mut cells: Vec<(usize, u8, f64)> = Vec::new();
    for (b, bld) in BUILDINGS.iter().enumerate() {
        let fw: f64 = bld.floor_weights.iter().sum();
        for (f, w) in bld.floor_weights.iter().enumerate() {
            cells.push((b, f as u8, shares(bld) * w / fw));
        }
    }
    let total_share: f64 = cells.iter().map(|c| c.2).sum();
    let exact: Vec<f64> = cells.iter().map(|c| c.2 / total_share * rows as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..cells.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let short = rows - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }

    let mut line = first_line;
    for ((b, floor, _), count) in cells.iter().zip(counts) {
        let refs: Vec<usize> = (0..world.refs.len())
            .filter(|&i| world.refs[i].building == *b && world.refs[i].floor == *floor)
            .collect();
        for _ in 0..count {
            let ref_index = refs[rng.random_range(0..refs.len())];
            let rp = &world.refs[ref_index];
            let mut pick = rng.random_range(0.0..phone_total);
            let mut phone_id = 0;
            for (p, &w) in camp.phone_weights.iter().enumerate() {
                if w > 0.0 {
                    phone_id = p;
                    if pick < w {
                        break;
                    }
                    pick -= w;
                }
            }
            let phone = &world.phones[phone_id];
            let mut rss = Box::new([NOT_DETECTED; WAP_COUNT]);
            for (ap_index, slot) in rss.iter_mut().enumerate() {
                if world.aps[ap_index].band_5ghz && !phone.has_5ghz {
                    continue;
                }
                let Some(mean) = mean_rss(world, camp, ref_index, ap_index) else {
                    continue;
                };
                let measured = -60.0 + phone.slope * (mean + 60.0) + phone.gain_db + phone.noise_db * noise.sample(rng);
                if measured < phone.sensitivity_dbm || rng.random_bool(0.04) {
                    continue;
                }
                *slot = (measured.round() as i16).clamp(-104, 0);
            }
            let timestamp = camp.start + rng.random_range(0..camp.span_days * DAY);
            let user_id = 1 + (phone_id as u32 * 7 + rp.space_id) % USERS;
            out.push(FingerprintRecord {
                id: RecordId { file: provenance, line },
                rss,
                longitude: (rp.pos[0] * 1e4).round() / 1e4,
                latitude: (rp.pos[1] * 1e4).round() / 1e4,
                floor: rp.floor,
                building_id: rp.building as u8,
                space_id: rp.space_id,
                relative_position: rp.relative_position,
                user_id,
                phone_id: phone_id as u32,
                timestamp,
            });
            line += 1;
        }
    }
    out
}

/// Generate `(training, validation)` sets.
pub fn generate(cfg: &SynthConfig) -> (FingerprintSet, FingerprintSet) {
    let world = build_world(cfg);
    let mut rng = seed::rng(cfg.seed, &[4]);
    let mut phone_order: Vec<usize> = (0..PHONES).collect();
    phone_order.shuffle(&mut rng);
    // Campaign A uses 14 phones, campaign B 12 (6 shared), validation 10.
    let a_phones: Vec<usize> = phone_order[..14].to_vec();
    let b_phones: Vec<usize> = phone_order[8..20].to_vec();
    let v_phones: Vec<usize> = phone_order[..4].iter().chain(&phone_order[15..21]).copied().collect();

    let camp_a = campaign(cfg, &world, 0, FIRST_CAMPAIGN, 0.0, 0.0, 0.0, &a_phones, None);
    let camp_b = campaign(
        cfg,
        &world,
        1,
        FIRST_CAMPAIGN + cfg.campaign_gap_days * DAY,
        cfg.drift_db_sd,
        cfg.moved_ap_fraction,
        cfg.off_ap_fraction,
        &b_phones,
        Some(&camp_a),
    );
    let camp_v = campaign(
        cfg,
        &world,
        2,
        FIRST_CAMPAIGN + 120 * DAY,
        cfg.drift_db_sd,
        cfg.moved_ap_fraction,
        cfg.off_ap_fraction,
        &v_phones,
        Some(&camp_b),
    );

    let n_a = (cfg.training_rows as f64 * cfg.first_campaign_share).round() as usize;
    let mut train = draw_records(
        &world,
        &camp_a,
        n_a,
        |b| b.train_share,
        Provenance::Training,
        2,
        &mut rng,
    );
    let b_rows = draw_records(
        &world,
        &camp_b,
        cfg.training_rows - n_a,
        |b| b.train_share,
        Provenance::Training,
        2 + n_a as u64,
        &mut rng,
    );
    train.extend(b_rows);
    let validation = draw_records(
        &world,
        &camp_v,
        cfg.validation_rows,
        |b| b.validation_share,
        Provenance::Validation,
        2,
        &mut rng,
    );
    let wrap = |p, d: &str, v: Vec<FingerprintRecord>| FingerprintSet::new(p, d, v.into_iter().map(Arc::new).collect());
    (
        wrap(Provenance::Training, "synthetic trainingData", train),
        wrap(Provenance::Validation, "synthetic validationData", validation),
    )
}

/// Write `trainingData.csv` and `validationData.csv` into `dir`.
pub fn write_corpus(dir: &Path, cfg: &SynthConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| crate::error::Error::io(dir, e))?;
    let (train, validation) = generate(cfg);
    let (tp, vp) = dataset::corpus_paths(dir);
    dataset::write_csv(&train, tp)?;
    dataset::write_csv(&validation, vp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_in_range() {
        let cfg = SynthConfig {
            training_rows: 400,
            validation_rows: 40,
            ..Default::default()
        };
        let (a, va) = generate(&cfg);
        let (b, _) = generate(&cfg);
        assert_eq!(a.len(), 400);
        assert_eq!(va.len(), 40);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x, y);
        }
        for r in a.iter().chain(va.iter()) {
            assert!(r.rss.iter().all(|&v| v == NOT_DETECTED || (-110..=0).contains(&v)));
            assert!(r.floor < BUILDINGS[r.building_id as usize].floors);
        }
        let detected: usize = a
            .iter()
            .map(|r| r.rss.iter().filter(|&&v| v != NOT_DETECTED).count())
            .sum();
        let mean = detected as f64 / a.len() as f64;
        assert!(mean > 5.0 && mean < 80.0, "mean detected APs {mean}");
    }
}

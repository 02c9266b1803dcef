//! Periodic-mobility generator.
//!
//! Users live in a home district, work in a work district ~2 km east and
//! eat or go out in a food district ~2 km north. Each user follows a weekly
//! schedule mapping every hour-of-week to a POI: home and work are personal,
//! while lunch, dinner and weekend venues are shared by all users, so a
//! venue visit is a function of the time slot alone. On each day a user checks in at 3 to 5 random hours between
//! 07:00 and 22:59, going to the scheduled POI except with probability
//! `epsilon`, when a uniformly random POI is chosen instead.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CheckIn, Dataset};
use crate::geocode::GeoPoint;

const SECONDS_PER_DAY: i64 = 86_400;
/// Monday 2024-01-01 00:00 UTC.
const DEFAULT_START: i64 = 1_704_067_200;
const BASE_LAT: f64 = 40.0;
const BASE_LON: f64 = -74.0;
const KM_PER_DEG_LAT: f64 = 111.195;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub users: usize,
    pub pois: usize,
    pub days: usize,
    pub seed: u64,
    pub epsilon: f64,
    /// First day, as Unix seconds at midnight UTC.
    pub start: i64,
}

impl SyntheticSpec {
    pub fn new(users: usize, pois: usize, days: usize, seed: u64) -> Self {
        SyntheticSpec {
            users,
            pois,
            days,
            seed,
            epsilon: 0.1,
            start: DEFAULT_START,
        }
    }

    pub fn with_epsilon(self, epsilon: f64) -> Self {
        SyntheticSpec { epsilon, ..self }
    }
}

struct Venues {
    lunch: [usize; 5],
    dinner: [usize; 7],
    /// Weekend late-morning and afternoon venue per weekend day.
    leisure: [[usize; 2]; 2],
}

struct Schedule<'a> {
    home: usize,
    work: usize,
    venues: &'a Venues,
}

impl Schedule<'_> {
    fn poi(&self, weekday: usize, hour: usize) -> usize {
        let v = self.venues;
        if weekday < 5 {
            match hour {
                9..=11 | 14..=17 => self.work,
                12..=13 => v.lunch[weekday],
                19..=20 => v.dinner[weekday],
                _ => self.home,
            }
        } else {
            match hour {
                10..=13 => v.leisure[weekday - 5][0],
                14..=17 => v.leisure[weekday - 5][1],
                19..=20 => v.dinner[weekday],
                _ => self.home,
            }
        }
    }
}

fn pick(range: &std::ops::Range<usize>, count: usize, rng: &mut impl Rng) -> Vec<usize> {
    let n = range.len();
    if n >= count {
        index::sample(rng, n, count).into_iter().map(|i| range.start + i).collect()
    } else {
        (0..count).map(|_| rng.gen_range(range.clone())).collect()
    }
}

/// Generates a reproducible dataset. The registry holds all `spec.pois`
/// POIs, visited or not; ids are `0..n` for users and POIs alike.
/// Requires `spec.pois >= 10`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Dataset {
    assert!(spec.pois >= 10, "synthetic registry needs at least 10 POIs");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_home = spec.pois * 2 / 5;
    let n_work = spec.pois / 5;
    let home = 0..n_home;
    let work = n_home..n_home + n_work;
    let food = n_home + n_work..spec.pois;

    let km_lon = KM_PER_DEG_LAT * BASE_LAT.to_radians().cos();
    let district = |p: usize| -> (f64, f64) {
        if home.contains(&p) {
            (0.0, 0.0)
        } else if work.contains(&p) {
            (0.0, 2.0)
        } else {
            (2.0, 0.0)
        }
    };
    let pois: Vec<GeoPoint> = (0..spec.pois)
        .map(|p| {
            let (north, east) = district(p);
            let dn = north + rng.gen_range(-0.4..0.4);
            let de = east + rng.gen_range(-0.4..0.4);
            GeoPoint {
                lat: BASE_LAT + dn / KM_PER_DEG_LAT,
                lon: BASE_LON + de / km_lon,
            }
        })
        .collect();

    let v = pick(&food, 16, &mut rng);
    let venues = Venues {
        lunch: v[0..5].try_into().expect("5 lunch venues"),
        dinner: v[5..12].try_into().expect("7 dinner venues"),
        leisure: [[v[12], v[13]], [v[14], v[15]]],
    };

    let mut sequences = Vec::with_capacity(spec.users);
    for user in 0..spec.users {
        let schedule = Schedule {
            home: rng.gen_range(home.clone()),
            work: rng.gen_range(work.clone()),
            venues: &venues,
        };
        let mut seq = Vec::new();
        for day in 0..spec.days {
            let weekday = day % 7;
            let visits = rng.gen_range(3..=5);
            let mut hours: Vec<usize> = index::sample(&mut rng, 16, visits)
                .into_iter()
                .map(|h| 7 + h)
                .collect();
            hours.sort_unstable();
            for hour in hours {
                let offset = rng.gen_range(0..3600);
                let poi = if rng.gen::<f64>() < spec.epsilon {
                    rng.gen_range(0..spec.pois)
                } else {
                    schedule.poi(weekday, hour)
                };
                seq.push(CheckIn {
                    user,
                    time: spec.start + day as i64 * SECONDS_PER_DAY + hour as i64 * 3600 + offset,
                    poi,
                });
            }
        }
        sequences.push(seq);
    }
    Dataset {
        user_ids: (0..spec.users).map(|u| u.to_string()).collect(),
        poi_ids: (0..spec.pois).map(|p| p.to_string()).collect(),
        pois,
        sequences,
        malformed: 0,
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;
    use crate::geocode::haversine_km;
    use crate::model::time_slot;

    /// Mean over users of the mutual information between the hour-of-week
    /// slot and the visited POI, in nats, from counts with the Miller-Madow
    /// bias correction applied to each entropy term.
    fn slot_poi_information(ds: &Dataset) -> f64 {
        let mut total = 0.0;
        for seq in &ds.sequences {
            let n = seq.len() as f64;
            let mut joint: HashMap<(usize, usize), f64> = HashMap::new();
            let mut slots: HashMap<usize, f64> = HashMap::new();
            let mut places: HashMap<usize, f64> = HashMap::new();
            for c in seq {
                let s = time_slot(c.time);
                *joint.entry((s, c.poi)).or_default() += 1.0;
                *slots.entry(s).or_default() += 1.0;
                *places.entry(c.poi).or_default() += 1.0;
            }
            let plug_in: f64 = joint
                .iter()
                .map(|(&(s, p), &c)| c / n * (c * n / (slots[&s] * places[&p])).ln())
                .sum();
            let bins = slots.len() as f64 + places.len() as f64 - 1.0 - joint.len() as f64;
            total += plug_in + bins / (2.0 * n);
        }
        total / ds.sequences.len() as f64
    }

    #[test]
    fn zero_epsilon_is_slot_deterministic() {
        let ds = generate_synthetic(&SyntheticSpec::new(12, 60, 28, 3).with_epsilon(0.0));
        for seq in &ds.sequences {
            let mut by_slot = HashMap::new();
            for c in seq {
                assert_eq!(*by_slot.entry(time_slot(c.time)).or_insert(c.poi), c.poi);
            }
        }
    }

    #[test]
    fn reproducible_from_seed() {
        let spec = SyntheticSpec::new(5, 30, 10, 42);
        assert_eq!(generate_synthetic(&spec), generate_synthetic(&spec));
        assert_ne!(
            generate_synthetic(&spec),
            generate_synthetic(&SyntheticSpec { seed: 43, ..spec })
        );
    }

    #[test]
    fn information_decreases_with_noise() {
        let mi: Vec<f64> = [0.0, 0.1, 0.5]
            .iter()
            .map(|&e| slot_poi_information(&generate_synthetic(&SyntheticSpec::new(10, 50, 400, 7).with_epsilon(e))))
            .collect();
        assert!(mi[0] > mi[1] && mi[1] > mi[2], "{mi:?}");
    }

    #[test]
    fn districts_are_about_two_km_apart() {
        let ds = generate_synthetic(&SyntheticSpec::new(1, 50, 1, 0));
        let centroid = |r: std::ops::Range<usize>| {
            let n = r.len() as f64;
            let (lat, lon) = r.fold((0.0, 0.0), |(a, b), p| (a + ds.pois[p].lat, b + ds.pois[p].lon));
            GeoPoint { lat: lat / n, lon: lon / n }
        };
        let (home, work, food) = (centroid(0..20), centroid(20..30), centroid(30..50));
        for d in [haversine_km(home, work), haversine_km(home, food)] {
            assert!((1.5..2.5).contains(&d), "district distance {d}");
        }
    }
}

use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, NaiveDateTime, Utc};
use flate2::read::MultiGzDecoder;
use log::warn;

use super::{Dataset, RawCheckIn};
use crate::error::{Error, Result};
use crate::geocode::GeoPoint;

/// Largest tolerated share of malformed rows; a single bad row is always
/// tolerated.
const MAX_MALFORMED_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    /// `user  ISO-8601 time  lat  lon  location_id`
    GowallaTsv,
    /// Eight columns: user, venue, category id, category name, lat, lon,
    /// timezone offset, UTC time such as `Tue Apr 03 18:00:09 +0000 2012`.
    FoursquareTsv,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gowalla_tsv" => Ok(Format::GowallaTsv),
            "foursquare_tsv" => Ok(Format::FoursquareTsv),
            _ => Err(Error::invalid(format!(
                "unknown format {s:?}; expected gowalla_tsv or foursquare_tsv"
            ))),
        }
    }
}

/// Parses ISO-8601 / RFC 3339 instants; a missing offset means UTC.
pub fn parse_timestamp(s: &str) -> Result<i64> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t.timestamp());
    }
    NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S")
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S"))
        .map(|t| t.and_utc().timestamp())
        .map_err(|_| Error::invalid(format!("unparseable timestamp {s:?}")))
}

pub fn format_timestamp(t: i64) -> String {
    DateTime::<Utc>::from_timestamp(t, 0)
        .map(|d| d.format("%Y-%m-%dT%H:%M:%SZ").to_string())
        .unwrap_or_else(|| t.to_string())
}

fn parse_row(line: &str, format: Format) -> Option<RawCheckIn> {
    let f: Vec<&str> = line.split('\t').map(str::trim).collect();
    let (user, time, lat, lon, poi) = match format {
        Format::GowallaTsv => {
            let [user, time, lat, lon, poi] = f[..] else {
                return None;
            };
            (user, parse_timestamp(time).ok()?, lat, lon, poi)
        }
        Format::FoursquareTsv => {
            let [user, poi, _, _, lat, lon, _, time] = f[..] else {
                return None;
            };
            let t = DateTime::parse_from_str(time, "%a %b %d %H:%M:%S %z %Y").ok()?;
            (user, t.timestamp(), lat, lon, poi)
        }
    };
    if user.is_empty() || poi.is_empty() {
        return None;
    }
    let point = GeoPoint::new(lat.parse().ok()?, lon.parse().ok()?).ok()?;
    Some(RawCheckIn {
        user: user.to_owned(),
        time,
        point,
        poi: poi.to_owned(),
    })
}

/// Parses check-in rows from any reader. Blank lines are ignored; other
/// unparseable rows are counted and skipped.
pub fn parse_reader(reader: impl BufRead, format: Format) -> Result<Dataset> {
    let mut rows = Vec::new();
    let mut bad_lines = Vec::new();
    let mut total = 0usize;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        match parse_row(&line, format) {
            Some(r) => rows.push(r),
            None => bad_lines.push(i + 1),
        }
    }
    let malformed = bad_lines.len();
    if malformed > 0 {
        let shown: Vec<String> = bad_lines.iter().take(5).map(|l| l.to_string()).collect();
        warn!("skipped {malformed} malformed rows (lines {}{})", shown.join(", "), if malformed > 5 { ", ..." } else { "" });
    }
    if malformed > 1 && malformed as f64 > MAX_MALFORMED_FRACTION * total as f64 {
        return Err(Error::Format(format!(
            "{malformed} of {total} rows are malformed (first at line {})",
            bad_lines[0]
        )));
    }
    Ok(Dataset::from_raw(&rows, malformed))
}

/// Parses a check-in file, transparently decompressing gzip input.
pub fn parse_checkins(path: &Path, format: Format) -> Result<Dataset> {
    let mut file = File::open(path)?;
    let mut magic = [0u8; 2];
    let n = file.read(&mut magic)?;
    let file = File::open(path)?;
    if n == 2 && magic == [0x1f, 0x8b] {
        parse_reader(BufReader::new(MultiGzDecoder::new(file)), format)
    } else {
        parse_reader(BufReader::new(file), format)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_rows_one_malformed() {
        let text = "0\t2010-10-19T23:55:27Z\t30.2359\t-97.7951\t22847\n\
                    0\tnot-a-time\t30.2\t-97.7\t1\n\
                    1\t2010-10-18T22:17:43Z\t30.2691\t-97.7494\t420315\n";
        let ds = parse_reader(text.as_bytes(), Format::GowallaTsv).unwrap();
        assert_eq!(ds.num_checkins(), 2);
        assert_eq!(ds.malformed, 1);

        let worse = format!("{text}x\ty\n");
        let err = parse_reader(worse.as_bytes(), Format::GowallaTsv).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn empty_input() {
        let ds = parse_reader("".as_bytes(), Format::GowallaTsv).unwrap();
        assert_eq!(ds.num_checkins(), 0);
        assert_eq!(ds.num_users(), 0);
    }

    #[test]
    fn foursquare_row() {
        let line = "470\t49bbd6c0f964a520f4531fe3\t4bf58dd8d48988d127951735\tArts & Crafts Store\t40.719810375488535\t-74.00258103213994\t-240\tTue Apr 03 18:00:09 +0000 2012";
        let ds = parse_reader(line.as_bytes(), Format::FoursquareTsv).unwrap();
        assert_eq!(ds.sequences[0][0].time, 1_333_476_009);
        assert_eq!(ds.poi_ids[0], "49bbd6c0f964a520f4531fe3");
        assert_eq!(ds.pois[0].lat, 40.719810375488535);
    }

    #[test]
    fn timestamps_roundtrip() {
        let t = parse_timestamp("2010-10-19T23:55:27Z").unwrap();
        assert_eq!(format_timestamp(t), "2010-10-19T23:55:27Z");
        assert_eq!(parse_timestamp("1970-01-01T00:00:00").unwrap(), 0);
        assert_eq!(parse_timestamp("1970-01-01T01:00:00+01:00").unwrap(), 0);
    }
}

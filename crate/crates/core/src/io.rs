//! Event JSON Lines and ranking CSV.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::{DeviceIdentity, Protocol};
use crate::engine::RankedResult;
use crate::stgrid::GeoPoint;
use crate::stvolume::{Event, UncertaintyEllipse};

#[derive(Debug, Error)]
pub enum ReadError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Wire form of one event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventRecord {
    pub id: String,
    pub protocol: Protocol,
    pub t: f64,
    pub lat: f64,
    pub lon: f64,
    pub ell_major_m: f64,
    pub ell_minor_m: f64,
    pub ell_orient_deg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device: Option<DeviceIdentity>,
}

impl From<&Event> for EventRecord {
    fn from(e: &Event) -> Self {
        EventRecord {
            id: e.id.clone(),
            protocol: e.protocol,
            t: e.t,
            lat: e.center.lat,
            lon: e.center.lon,
            ell_major_m: e.ellipse.semi_major_m,
            ell_minor_m: e.ellipse.semi_minor_m,
            ell_orient_deg: e.ellipse.orientation_deg,
            device: e.device.clone(),
        }
    }
}

impl TryFrom<EventRecord> for Event {
    type Error = String;

    fn try_from(r: EventRecord) -> Result<Self, String> {
        let center = GeoPoint::new(r.lat, r.lon).map_err(|e| e.to_string())?;
        let ellipse = UncertaintyEllipse::new(r.ell_major_m, r.ell_minor_m, r.ell_orient_deg)?;
        let device = r.device.map(|mut d| {
            d.protocol = Some(r.protocol);
            d
        });
        let e = Event { id: r.id, protocol: r.protocol, t: r.t, center, ellipse, device };
        e.check()?;
        Ok(e)
    }
}

/// Parses one line; `line` is 1-based and only used for the error.
pub fn parse_event(text: &str, line: usize) -> Result<Event, ReadError> {
    let malformed = |message: String| ReadError::Malformed { line, message };
    let rec: EventRecord = serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
    Event::try_from(rec).map_err(malformed)
}

/// Iterates the events of a JSONL stream, skipping blank lines.
pub fn read_events<R: BufRead>(reader: R) -> impl Iterator<Item = Result<Event, ReadError>> {
    reader.lines().enumerate().filter_map(|(i, l)| match l {
        Err(e) => Some(Err(ReadError::Io(e))),
        Ok(l) if l.trim().is_empty() => None,
        Ok(l) => Some(parse_event(&l, i + 1)),
    })
}

pub fn write_event<W: Write>(mut w: W, e: &Event) -> io::Result<()> {
    serde_json::to_writer(&mut w, &EventRecord::from(e))?;
    w.write_all(b"\n")
}

pub const RANKING_HEADER: &str = "rank,id_a,id_b,ctl,tcov,scov,combined,device_match,overall,cooccur_count,pruned_reason";

pub fn write_rankings<W: Write>(mut w: W, results: &[RankedResult]) -> io::Result<()> {
    writeln!(w, "{RANKING_HEADER}")?;
    for r in results {
        let s = &r.scores;
        let dm = s.device_match.map(|d| d.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},",
            r.rank, r.pair.id_a, r.pair.id_b, s.ctl, s.tcov, s.scov, s.combined, dm, s.overall, r.cooccur_count
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINE: &str = r#"{"id":"35000001000001","protocol":"GSM","t":1704067300.5,"lat":36.17,"lon":-115.14,"ell_major_m":100,"ell_minor_m":50,"ell_orient_deg":30,"device":{"tac":"35000001"}}"#;

    #[test]
    fn round_trip() {
        let e = parse_event(LINE, 1).unwrap();
        assert_eq!(e.device.as_ref().unwrap().protocol, Some(Protocol::Gsm));
        let mut buf = Vec::new();
        write_event(&mut buf, &e).unwrap();
        let again = parse_event(std::str::from_utf8(&buf).unwrap().trim_end(), 1).unwrap();
        assert_eq!(e, again);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let input = format!("{LINE}\n\n{{\"id\":\"x\"}}\n");
        let out: Vec<_> = read_events(input.as_bytes()).collect();
        assert_eq!(out.len(), 2);
        assert!(out[0].is_ok());
        match &out[1] {
            Err(ReadError::Malformed { line, .. }) => assert_eq!(*line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn semantic_errors_rejected() {
        let bad = LINE.replace("\"ell_minor_m\":50", "\"ell_minor_m\":500");
        assert!(parse_event(&bad, 7).unwrap_err().to_string().starts_with("line 7:"));
        let bad = LINE.replace("\"lat\":36.17", "\"lat\":95");
        assert!(parse_event(&bad, 1).is_err());
        let bad = LINE.replace("\"tac\":\"35000001\"", "\"oui\":\"00:00:01\"");
        assert!(parse_event(&bad, 1).is_err());
    }
}

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{sort_chronologically, GraphDims, Interaction};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CsvFormat {
    /// Header line, then `user_id,item_id,timestamp,state_label,f1,...,f_de`.
    Jodie,
    /// No header; `user,item,timestamp[,f1,...]`.
    Generic,
}

impl std::str::FromStr for CsvFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jodie" => Ok(CsvFormat::Jodie),
            "generic" => Ok(CsvFormat::Generic),
            other => Err(Error::InvalidArgument(format!("unknown csv format '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParsedLog {
    pub events: Vec<Interaction>,
    pub dims: GraphDims,
    /// `user_ids[dense] = original`.
    pub user_ids: Vec<i64>,
    pub item_ids: Vec<i64>,
}

struct RawRow {
    user: i64,
    item: i64,
    timestamp: f64,
    features: Vec<f64>,
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, idx: usize, line: u64, name: &str) -> Result<T> {
    let raw = rec.get(idx).unwrap_or("").trim();
    raw.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("non-numeric {name} '{raw}'"),
    })
}

fn dense_map(ids: impl Iterator<Item = i64>) -> (BTreeMap<i64, usize>, Vec<i64>) {
    let mut map = BTreeMap::new();
    for id in ids {
        map.entry(id).or_insert(0);
    }
    let originals: Vec<i64> = map.keys().copied().collect();
    for (dense, v) in map.values_mut().enumerate() {
        *v = dense;
    }
    (map, originals)
}

fn parse_rows<R: Read>(source: R, format: CsvFormat) -> Result<Vec<(u64, RawRow)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let (fixed, skip_header) = match format {
        CsvFormat::Jodie => (4, true),
        CsvFormat::Generic => (3, false),
    };

    let mut rows: Vec<(u64, RawRow)> = Vec::new();
    let mut arity: Option<usize> = None;
    for (k, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(k as u64 + 1);
        if skip_header && k == 0 {
            continue;
        }
        if rec.len() == 1 && rec.get(0).is_some_and(str::is_empty) {
            continue;
        }
        if rec.len() < fixed {
            return Err(Error::Parse {
                line,
                msg: format!("expected at least {fixed} fields, found {}", rec.len()),
            });
        }
        match arity {
            None => arity = Some(rec.len()),
            Some(n) if n != rec.len() => {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected {n} fields, found {}", rec.len()),
                })
            }
            _ => {}
        }
        let user = field::<i64>(&rec, 0, line, "user id")?;
        let item = field::<i64>(&rec, 1, line, "item id")?;
        let timestamp = field::<f64>(&rec, 2, line, "timestamp")?;
        if !timestamp.is_finite() || timestamp < 0.0 {
            return Err(Error::Parse {
                line,
                msg: format!("timestamp must be finite and non-negative, got {timestamp}"),
            });
        }
        if format == CsvFormat::Jodie {
            // state label: validated, then dropped
            field::<f64>(&rec, 3, line, "state label")?;
        }
        let features = (fixed..rec.len())
            .map(|j| field::<f64>(&rec, j, line, "edge feature"))
            .collect::<Result<Vec<_>>>()?;
        rows.push((
            line,
            RawRow {
                user,
                item,
                timestamp,
                features,
            },
        ));
    }
    if rows.is_empty() {
        return Err(Error::Empty("interaction file has no data rows"));
    }

    Ok(rows)
}

/// Parse an interaction log, sort it chronologically (ties keep input
/// order) and re-index user and item ids densely in ascending original order.
pub fn parse_event_csv<R: Read>(source: R, format: CsvFormat) -> Result<ParsedLog> {
    let rows: Vec<RawRow> = parse_rows(source, format)?.into_iter().map(|(_, r)| r).collect();
    let (user_map, user_ids) = dense_map(rows.iter().map(|r| r.user));
    let (item_map, item_ids) = dense_map(rows.iter().map(|r| r.item));
    let d_e = rows[0].features.len();
    let mut events: Vec<Interaction> = rows
        .into_iter()
        .enumerate()
        .map(|(k, r)| Interaction {
            user_id: user_map[&r.user],
            item_id: item_map[&r.item],
            timestamp: r.timestamp,
            edge_features: r.features,
            seq_no: k,
        })
        .collect();
    sort_chronologically(&mut events);
    Ok(ParsedLog {
        events,
        dims: GraphDims {
            n_users: user_ids.len(),
            n_items: item_ids.len(),
            d_e,
        },
        user_ids,
        item_ids,
    })
}

/// Read a generic-format file whose ids are already dense, keeping them
/// as-is. Ids and feature widths are checked against `dims`.
pub fn read_dense_events<R: Read>(source: R, dims: GraphDims) -> Result<Vec<Interaction>> {
    let parsed = parse_rows(source, CsvFormat::Generic)?;
    let mut events = Vec::with_capacity(parsed.len());
    for (k, (line, r)) in parsed.into_iter().enumerate() {
        let dense = |id: i64, len: usize, what: &str| {
            usize::try_from(id)
                .ok()
                .filter(|&v| v < len)
                .ok_or_else(|| Error::Parse {
                    line,
                    msg: format!("{what} id {id} outside 0..{len}"),
                })
        };
        let user_id = dense(r.user, dims.n_users, "user")?;
        let item_id = dense(r.item, dims.n_items, "item")?;
        if r.features.len() != dims.d_e {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} edge features, found {}", dims.d_e, r.features.len()),
            });
        }
        events.push(Interaction {
            user_id,
            item_id,
            timestamp: r.timestamp,
            edge_features: r.features,
            seq_no: k,
        });
    }
    sort_chronologically(&mut events);
    Ok(events)
}

/// SHA-256 over the canonical generic-format rendering of `events`.
pub fn fingerprint(events: &[Interaction]) -> String {
    use sha2::{Digest, Sha256};
    let mut buf = Vec::new();
    write_events_csv(&mut buf, events).expect("writing to memory");
    crate::config::hex(&Sha256::digest(&buf))
}

/// Write events in the generic format (dense ids, no header).
pub fn write_events_csv<W: Write>(out: W, events: &[Interaction]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    let mut row: Vec<String> = Vec::new();
    for e in events {
        row.clear();
        row.push(e.user_id.to_string());
        row.push(e.item_id.to_string());
        row.push(format_f64(e.timestamp));
        row.extend(e.edge_features.iter().map(|&x| format_f64(x)));
        w.write_record(&row).map_err(csv_io)?;
    }
    w.flush().map_err(|e| Error::io("<events>", e))
}

/// Two-column `original_id,dense_id` map with a header row.
pub fn write_id_map<W: Write>(out: W, originals: &[i64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["original_id", "dense_id"]).map_err(csv_io)?;
    for (dense, orig) in originals.iter().enumerate() {
        w.write_record([orig.to_string(), dense.to_string()])
            .map_err(csv_io)?;
    }
    w.flush().map_err(|e| Error::io("<id map>", e))
}

fn csv_io(e: csv::Error) -> Error {
    Error::io("<csv>", std::io::Error::other(e.to_string()))
}

/// Shortest representation that parses back to the same `f64`.
fn format_f64(x: f64) -> String {
    format!("{x:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_generic() {
        let log = parse_event_csv("0,0,1.0\n0,1,2.0".as_bytes(), CsvFormat::Generic).unwrap();
        assert_eq!(log.events.len(), 2);
        assert_eq!(
            log.dims,
            GraphDims {
                n_users: 1,
                n_items: 2,
                d_e: 0
            }
        );
    }

    #[test]
    fn dense_events_keep_ids_and_check_ranges() {
        let dims = GraphDims { n_users: 2, n_items: 3, d_e: 0 };
        let events = read_dense_events("1,2,5.0\n0,0,1.0\n".as_bytes(), dims).unwrap();
        assert_eq!((events[0].user_id, events[0].item_id, events[0].seq_no), (0, 0, 0));
        assert_eq!((events[1].user_id, events[1].item_id, events[1].seq_no), (1, 2, 1));
        assert!(read_dense_events("0,3,1.0\n".as_bytes(), dims).is_err());
        assert!(read_dense_events("0,0,1.0,0.5\n".as_bytes(), dims).is_err());
    }

    #[test]
    fn non_numeric_field_names_line() {
        let err = parse_event_csv("0,x,1.0".as_bytes(), CsvFormat::Generic).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
        let err = parse_event_csv("0,0,1.0\n1,2\n".as_bytes(), CsvFormat::Generic).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = parse_event_csv("0,0,1.0,3\n1,2,2.0\n".as_bytes(), CsvFormat::Generic).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn empty_input_is_error() {
        assert!(matches!(
            parse_event_csv("".as_bytes(), CsvFormat::Generic),
            Err(Error::Empty(_))
        ));
        assert!(matches!(
            parse_event_csv("user_id,item_id,timestamp,state_label,f\n".as_bytes(), CsvFormat::Jodie),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn jodie_drops_label_and_resorts() {
        let src = "user_id,item_id,timestamp,state_label,comma_separated_list_of_features\n\
                   10,5,3.0,0,0.1,0.2\n\
                   7,5,1.0,1,0.3,0.4\n\
                   10,9,1.0,0,0.5,0.6\n";
        let log = parse_event_csv(src.as_bytes(), CsvFormat::Jodie).unwrap();
        assert_eq!(log.dims.d_e, 2);
        assert_eq!(log.user_ids, vec![7, 10]);
        assert_eq!(log.item_ids, vec![5, 9]);
        let order: Vec<(usize, usize, f64)> = log
            .events
            .iter()
            .map(|e| (e.user_id, e.item_id, e.timestamp))
            .collect();
        // tie at t=1.0 keeps input order
        assert_eq!(order, vec![(0, 0, 1.0), (1, 1, 1.0), (1, 0, 3.0)]);
        assert_eq!(log.events[0].edge_features, vec![0.3, 0.4]);
        let seqs: Vec<usize> = log.events.iter().map(|e| e.seq_no).collect();
        assert_eq!(seqs, vec![0, 1, 2]);
        let err = parse_event_csv(
            "h\n1,2,3.0,zz,0.1\n".as_bytes(),
            CsvFormat::Jodie,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn canonical_roundtrip() {
        let src = "3,1,0.5,0.25\n4,2,1.5,-1e-7\n";
        let log = parse_event_csv(src.as_bytes(), CsvFormat::Generic).unwrap();
        let mut buf = Vec::new();
        write_events_csv(&mut buf, &log.events).unwrap();
        let again = parse_event_csv(buf.as_slice(), CsvFormat::Generic).unwrap();
        assert_eq!(again.events, log.events);
        let mut map = Vec::new();
        write_id_map(&mut map, &log.user_ids).unwrap();
        assert_eq!(String::from_utf8(map).unwrap(), "original_id,dense_id\n3,0\n4,1\n");
    }
}

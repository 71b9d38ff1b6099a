//! CSV sidecars: the word alignment table and the 2-D sensor layout.

use std::collections::BTreeMap;

use neurodecode_core::data::{WordAlignment, WordEntry};

use crate::error::FormatError;

type Res<T> = std::result::Result<T, FormatError>;

fn reader<'a>(text: &'a str, columns: &[&str]) -> Res<csv::Reader<&'a [u8]>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| FormatError::Syntax {
        line: 1,
        message: e.to_string(),
    })?;
    if headers.iter().collect::<Vec<_>>() != columns {
        return Err(FormatError::Syntax {
            line: 1,
            message: format!("expected header {}, found {}", columns.join(","), headers.iter().collect::<Vec<_>>().join(",")),
        });
    }
    Ok(rdr)
}

fn rows(rdr: csv::Reader<&[u8]>) -> impl Iterator<Item = Res<(usize, csv::StringRecord)>> + '_ {
    rdr.into_records().map(|r| {
        r.map(|rec| (rec.position().map_or(0, |p| p.line() as usize), rec))
            .map_err(|e| FormatError::Syntax {
                line: e.position().map_or(0, |p| p.line() as usize),
                message: e.to_string(),
            })
    })
}

fn number<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, what: &str, line: usize) -> Res<T> {
    rec[i].parse().map_err(|_| FormatError::Syntax {
        line,
        message: format!("{what} {:?} is not a number", &rec[i]),
    })
}

pub const ALIGNMENT_COLUMNS: [&str; 4] = ["word", "onset_s", "offset_s", "segment"];
pub const LAYOUT_COLUMNS: [&str; 3] = ["channel", "x", "y"];

/// Parses `word,onset_s,offset_s,segment` rows in file order.
pub fn load_alignment(text: &str) -> Res<WordAlignment> {
    let mut entries = Vec::new();
    for row in rows(reader(text, &ALIGNMENT_COLUMNS)?) {
        let (line, rec) = row?;
        let onset_s: f64 = number(&rec, 1, "onset_s", line)?;
        let offset_s: f64 = number(&rec, 2, "offset_s", line)?;
        let segment: usize = number(&rec, 3, "segment", line)?;
        if !(onset_s >= 0.0 && onset_s < offset_s) {
            return Err(FormatError::Invalid {
                line,
                message: format!("need 0 <= onset < offset, got {onset_s}..{offset_s}"),
            });
        }
        entries.push(WordEntry {
            word: rec[0].to_string(),
            onset_s,
            offset_s,
            segment,
        });
    }
    Ok(WordAlignment::new(entries).expect("rows validated above"))
}

pub fn write_alignment(a: &WordAlignment) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(ALIGNMENT_COLUMNS).expect("in-memory write");
    for e in &a.entries {
        w.write_record([e.word.clone(), e.onset_s.to_string(), e.offset_s.to_string(), e.segment.to_string()])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
}

/// Parses `channel,x,y` rows into a name → position map.
pub fn load_layout(text: &str) -> Res<BTreeMap<String, [f64; 2]>> {
    let mut out = BTreeMap::new();
    for row in rows(reader(text, &LAYOUT_COLUMNS)?) {
        let (line, rec) = row?;
        let x: f64 = number(&rec, 1, "x", line)?;
        let y: f64 = number(&rec, 2, "y", line)?;
        if !((0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y)) {
            return Err(FormatError::Invalid {
                line,
                message: format!("position ({x}, {y}) lies outside the unit square"),
            });
        }
        if out.insert(rec[0].to_string(), [x, y]).is_some() {
            return Err(FormatError::Invalid {
                line,
                message: format!("channel {} listed twice", &rec[0]),
            });
        }
    }
    Ok(out)
}

pub fn write_layout<'a>(entries: impl IntoIterator<Item = (&'a str, [f64; 2])>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(LAYOUT_COLUMNS).expect("in-memory write");
    for (name, [x, y]) in entries {
        w.write_record([name.to_string(), x.to_string(), y.to_string()])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_alignment_row() {
        let a = load_alignment("word,onset_s,offset_s,segment\nalice,0.50,0.91,0\n").unwrap();
        assert_eq!(
            a.entries,
            vec![WordEntry {
                word: "alice".into(),
                onset_s: 0.5,
                offset_s: 0.91,
                segment: 0
            }]
        );
    }

    #[test]
    fn header_only_is_empty() {
        assert!(load_alignment("word,onset_s,offset_s,segment\n").unwrap().entries.is_empty());
    }

    #[test]
    fn reversed_times_fail_on_their_line() {
        let text = "word,onset_s,offset_s,segment\na,0,1,0\nb,2,1.5,0\n";
        assert!(matches!(load_alignment(text), Err(FormatError::Invalid { line: 3, .. })));
    }

    #[test]
    fn non_numeric_time_is_a_parse_error() {
        let text = "word,onset_s,offset_s,segment\na,zero,1,0\n";
        assert!(matches!(load_alignment(text), Err(FormatError::Syntax { line: 2, .. })));
    }

    #[test]
    fn alignment_round_trip() {
        let text = "word,onset_s,offset_s,segment\n\"a,b\",0.1,0.30000000000000004,2\nc,1,2,0\n";
        let a = load_alignment(text).unwrap();
        assert_eq!(load_alignment(&write_alignment(&a)).unwrap(), a);
    }

    #[test]
    fn layout_bounds_and_duplicates() {
        let ok = load_layout("channel,x,y\nFz,0.5,0.9\nCz,0.5,0.5\n").unwrap();
        assert_eq!(ok["Fz"], [0.5, 0.9]);
        assert_eq!(load_layout(&write_layout(ok.iter().map(|(k, v)| (k.as_str(), *v)))).unwrap(), ok);
        assert!(matches!(load_layout("channel,x,y\nFz,1.5,0\n"), Err(FormatError::Invalid { line: 2, .. })));
        assert!(matches!(
            load_layout("channel,x,y\nFz,0,0\nFz,1,1\n"),
            Err(FormatError::Invalid { line: 3, .. })
        ));
    }
}

//! Training history CSV: `epoch,lr,train_loss,train_top1,val_top1,val_top5,seconds`.
//!
//! Floats use Rust's shortest round-trip formatting, so identical histories
//! produce identical bytes. A missing validation value is an empty field.

use std::fs;
use std::path::Path;

use iresnet_core::trainer::{EpochRecord, TrainHistory};

use crate::error::{Error, Result};

pub const HEADER: [&str; 7] = ["epoch", "lr", "train_loss", "train_top1", "val_top1", "val_top5", "seconds"];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn to_string(records: &[EpochRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(HEADER).expect("writing to memory");
    for r in records {
        w.write_record([
            r.epoch.to_string(),
            r.lr.to_string(),
            r.train_loss.to_string(),
            r.train_top1.to_string(),
            opt(r.val_top1),
            opt(r.val_top5),
            r.seconds.to_string(),
        ])
        .expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("writing to memory")).expect("csv output is UTF-8")
}

pub fn write(path: &Path, records: &[EpochRecord]) -> Result<()> {
    fs::write(path, to_string(records)).map_err(Error::io(path))
}

pub fn from_str(text: &str, origin: &Path) -> Result<TrainHistory> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        column: 1,
        message,
    };
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| parse_err(1, e.to_string()))?;
    if header.iter().ne(HEADER) {
        return Err(parse_err(1, format!("expected header {}", HEADER.join(","))));
    }
    let mut records = Vec::new();
    for row in r.records() {
        let row = row.map_err(|e| parse_err(e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let num = |i: usize| -> Result<f64> {
            row[i].parse().map_err(|_| parse_err(line, format!("{}: not a number: {:?}", HEADER[i], &row[i])))
        };
        let opt_num = |i: usize| -> Result<Option<f64>> {
            if row[i].is_empty() {
                Ok(None)
            } else {
                num(i).map(Some)
            }
        };
        records.push(EpochRecord {
            epoch: row[0].parse().map_err(|_| parse_err(line, format!("epoch: not an integer: {:?}", &row[0])))?,
            lr: num(1)?,
            train_loss: num(2)?,
            train_top1: num(3)?,
            val_top1: opt_num(4)?,
            val_top5: opt_num(5)?,
            seconds: num(6)?,
        });
    }
    Ok(TrainHistory { records })
}

pub fn read(path: &Path) -> Result<TrainHistory> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    from_str(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(epoch: usize, val: Option<f64>) -> EpochRecord {
        EpochRecord {
            epoch,
            lr: 0.01,
            train_loss: 1.0 / 3.0,
            train_top1: 0.5,
            val_top1: val,
            val_top5: val,
            seconds: 0.0,
        }
    }

    #[test]
    fn layout_and_round_trip() {
        let records = vec![rec(1, Some(0.25)), rec(2, None)];
        let text = to_string(&records);
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("epoch,lr,train_loss,train_top1,val_top1,val_top5,seconds"));
        assert_eq!(lines.next(), Some("1,0.01,0.3333333333333333,0.5,0.25,0.25,0"));
        assert_eq!(lines.next(), Some("2,0.01,0.3333333333333333,0.5,,,0"));
        assert_eq!(from_str(&text, Path::new("h")).unwrap().records, records);
    }

    #[test]
    fn empty_history_is_header_only() {
        assert_eq!(to_string(&[]).lines().count(), 1);
    }

    #[test]
    fn bad_number_names_line() {
        let text = format!("{}\n1,0.1,x,0.5,,,0\n", HEADER.join(","));
        match from_str(&text, Path::new("h")).unwrap_err() {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 2);
                assert!(message.contains("train_loss"));
            }
            other => panic!("{other:?}"),
        }
    }
}

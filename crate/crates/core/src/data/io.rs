//! Line-delimited dataset files.
//!
//! ```text
//! dsclap-dataset v1
//! <id>\t<source>\t<label or empty>\t<space-separated tokens>\t<space-separated audio>
//! ```
//!
//! Audio samples are written with 9 significant digits.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{PairedSample, Source};
use crate::encoders::{TokenSequence, Waveform};
use crate::error::{Error, Result};

pub const DATASET_HEADER: &str = "dsclap-dataset v1";

pub fn write_dataset(path: impl AsRef<Path>, samples: &[PairedSample]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_records(&mut w, samples).map_err(|e| Error::io(path, e))
}

fn write_records(w: &mut impl Write, samples: &[PairedSample]) -> std::io::Result<()> {
    writeln!(w, "{DATASET_HEADER}")?;
    for s in samples {
        write!(w, "{}\t{}\t", s.id, s.source.as_str())?;
        if let Some(label) = s.label {
            write!(w, "{label}")?;
        }
        w.write_all(b"\t")?;
        for (i, t) in s.text.tokens().iter().enumerate() {
            if i > 0 {
                w.write_all(b" ")?;
            }
            write!(w, "{t}")?;
        }
        w.write_all(b"\t")?;
        for (i, x) in s.audio.samples().iter().enumerate() {
            if i > 0 {
                w.write_all(b" ")?;
            }
            write!(w, "{x:.8e}")?;
        }
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<PairedSample>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines.next().transpose().map_err(|e| Error::io(path, e))?;
    if header.as_deref() != Some(DATASET_HEADER) {
        return Err(Error::Malformed {
            line: 1,
            field: "header",
            reason: format!("expected `{DATASET_HEADER}`"),
        });
    }
    let mut out = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        out.push(parse_record(&line, idx + 2)?);
    }
    Ok(out)
}

fn parse_record(line: &str, line_no: usize) -> Result<PairedSample> {
    let malformed = |field: &'static str, reason: String| Error::Malformed {
        line: line_no,
        field,
        reason,
    };
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 5 {
        return Err(malformed("record", format!("expected 5 tab-separated fields, found {}", fields.len())));
    }
    let id = fields[0];
    if id.is_empty() {
        return Err(malformed("id", "empty id".into()));
    }
    let source: Source = fields[1].parse().map_err(|e| malformed("source", e))?;
    let label = match fields[2] {
        "" => None,
        s => Some(s.parse::<u32>().map_err(|e| malformed("label", format!("`{s}`: {e}")))?),
    };
    let tokens = fields[3]
        .split(' ')
        .map(|t| t.parse::<u32>().map_err(|e| malformed("text_tokens", format!("`{t}`: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    let text = TokenSequence::new(tokens).map_err(|e| malformed("text_tokens", e.to_string()))?;
    let samples = fields[4]
        .split(' ')
        .map(|x| x.parse::<f64>().map_err(|e| malformed("audio", format!("`{x}`: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    let audio = Waveform::new(samples).map_err(|e| malformed("audio", e.to_string()))?;
    Ok(PairedSample {
        id: id.to_string(),
        audio,
        text,
        label,
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_labeled_pairs;

    #[test]
    fn empty_dataset_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.tsv");
        write_dataset(&p, &[]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), format!("{DATASET_HEADER}\n"));
        assert!(read_dataset(&p).unwrap().is_empty());
    }

    #[test]
    fn ids_and_order_survive() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("three.tsv");
        let mut data = generate_labeled_pairs(1, 3, 4, 4, crate::data::Task::Mcic).unwrap();
        data[1].label = None;
        data[2].source = Source::Asr;
        write_dataset(&p, &data).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 4);
        let back = read_dataset(&p).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn malformed_records_name_line_and_field() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.tsv");
        let cases = [
            ("s1\tmanual\t\t1 2\t0.5 x", 2, "audio"),
            ("s1\tmanual\tseven\t1 2\t0.5", 2, "label"),
            ("s1\tradio\t\t1 2\t0.5", 2, "source"),
            ("s1\tmanual\t\t1 -2\t0.5", 2, "text_tokens"),
            ("s1\tmanual\t\t1 2", 2, "record"),
        ];
        for (record, line, field) in cases {
            std::fs::write(&p, format!("{DATASET_HEADER}\n{record}\n")).unwrap();
            match read_dataset(&p).unwrap_err() {
                Error::Malformed { line: l, field: f, .. } => assert_eq!((l, f), (line, field), "{record}"),
                e => panic!("unexpected {e}"),
            }
        }
        std::fs::write(&p, format!("{DATASET_HEADER}\ns0\tasr\t\t1\t0.1\ns1\tasr\t\t\t0.1\n")).unwrap();
        let err = read_dataset(&p).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        std::fs::write(&p, "not a dataset\n").unwrap();
        assert!(matches!(read_dataset(&p), Err(Error::Malformed { line: 1, field: "header", .. })));
    }
}

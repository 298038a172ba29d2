use std::io::{Read, Write};

use super::{
    check_probs, Arm, ClassLabel, DataError, Dataset, PredictionRecord, ReaderGroup,
    ReaderRecord,
};

const PRED_REQUIRED: [&str; 6] = [
    "image_id",
    "patient_id",
    "true_label",
    "p_aegja",
    "p_eegja",
    "p_control",
];
const PRED_OPTIONAL: [&str; 4] = ["center", "modality", "sex", "age"];
const READER_REQUIRED: [&str; 5] = ["reader_id", "group", "arm", "image_id", "pred_label"];
const READER_OPTIONAL: [&str; 1] = ["elapsed_s"];

/// Result of parsing a predictions file.
#[derive(Debug, Clone)]
pub struct ParsedPredictions {
    pub dataset: Dataset,
    /// Rows whose probabilities were renormalized (lenient mode only).
    pub renormalized: usize,
}

struct Columns {
    positions: Vec<Option<usize>>,
}

impl Columns {
    fn resolve(
        header: &csv::StringRecord,
        required: &[&str],
        optional: &[&str],
    ) -> Result<Self, DataError> {
        let names: Vec<String> = header
            .iter()
            .enumerate()
            .map(|(i, h)| {
                let h = if i == 0 { h.trim_start_matches('\u{feff}') } else { h };
                h.trim().to_ascii_lowercase()
            })
            .collect();
        for n in &names {
            if !required.contains(&n.as_str()) && !optional.contains(&n.as_str()) {
                return Err(DataError::UnknownColumn(n.clone()));
            }
        }
        let mut positions = Vec::with_capacity(required.len() + optional.len());
        for r in required {
            let pos = names
                .iter()
                .position(|n| n == r)
                .ok_or_else(|| DataError::MissingColumn(r.to_string()))?;
            positions.push(Some(pos));
        }
        for o in optional {
            positions.push(names.iter().position(|n| n == o));
        }
        Ok(Self { positions })
    }

    fn get<'r>(&self, rec: &'r csv::StringRecord, slot: usize) -> Option<&'r str> {
        self.positions[slot].and_then(|p| rec.get(p)).map(str::trim)
    }
}

fn reader_for<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(input)
}

fn row_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map(|p| p.line()).unwrap_or(0)
}

fn csv_error(err: csv::Error) -> DataError {
    let row = err.position().map(|p| p.line()).unwrap_or(0);
    match err.kind() {
        csv::ErrorKind::Io(e) => DataError::Io(e.to_string()),
        _ => DataError::Malformed {
            row,
            msg: err.to_string(),
        },
    }
}

fn parse_f64(s: &str, row: u64, column: &str) -> Result<f64, DataError> {
    let v: f64 = s.parse().map_err(|_| DataError::Malformed {
        row,
        msg: format!("{column}: not a number: {s:?}"),
    })?;
    if !v.is_finite() {
        return Err(DataError::Malformed {
            row,
            msg: format!("{column}: non-finite value {s:?}"),
        });
    }
    Ok(v)
}

fn opt_string(s: Option<&str>) -> Option<String> {
    s.filter(|v| !v.is_empty()).map(str::to_string)
}

/// Parses the predictions CSV. Rows are reported by their line number in
/// the file (the header is line 1).
pub fn parse_predictions<R: Read>(input: R, strict: bool) -> Result<ParsedPredictions, DataError> {
    let mut rdr = reader_for(input);
    let header = rdr.headers().map_err(csv_error)?.clone();
    let cols = Columns::resolve(&header, &PRED_REQUIRED, &PRED_OPTIONAL)?;

    let mut records = Vec::new();
    let mut rows = Vec::new();
    let mut renormalized = 0usize;
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let row = row_of(&rec);
        let field = |slot: usize| cols.get(&rec, slot).unwrap_or("");
        let image_id = field(0);
        let patient_id = field(1);
        if image_id.is_empty() || patient_id.is_empty() {
            return Err(DataError::Malformed {
                row,
                msg: "empty image_id or patient_id".into(),
            });
        }
        let truth: ClassLabel = field(2).parse().map_err(|_| DataError::UnknownLabel {
            row,
            value: field(2).to_string(),
        })?;
        let mut probs = [0.0; 3];
        for (k, p) in probs.iter_mut().enumerate() {
            *p = parse_f64(field(3 + k), row, PRED_REQUIRED[3 + k])?;
        }
        if let Some(fixed) = check_probs(&probs, row, strict)? {
            probs = fixed;
            renormalized += 1;
        }
        records.push(PredictionRecord {
            image_id: image_id.to_string(),
            patient_id: patient_id.to_string(),
            truth,
            probs,
            center: opt_string(cols.get(&rec, 6)),
            modality: opt_string(cols.get(&rec, 7)),
            sex: opt_string(cols.get(&rec, 8)),
            age: opt_string(cols.get(&rec, 9)),
        });
        rows.push(row);
    }
    if records.is_empty() {
        return Err(DataError::Empty);
    }
    let dataset = Dataset::from_checked(records, |i| rows[i])?;
    Ok(ParsedPredictions {
        dataset,
        renormalized,
    })
}

/// Writes a dataset in the predictions CSV format. Optional columns appear
/// only when at least one record carries a value for them.
pub fn write_predictions<W: Write>(ds: &Dataset, out: W) -> Result<(), DataError> {
    fn optional_field(r: &PredictionRecord, slot: usize) -> &Option<String> {
        match slot {
            0 => &r.center,
            1 => &r.modality,
            2 => &r.sex,
            _ => &r.age,
        }
    }
    let present: Vec<usize> = (0..PRED_OPTIONAL.len())
        .filter(|&slot| ds.records().iter().any(|r| optional_field(r, slot).is_some()))
        .collect();

    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let mut header: Vec<&str> = PRED_REQUIRED.to_vec();
    header.extend(present.iter().map(|&slot| PRED_OPTIONAL[slot]));
    w.write_record(&header).map_err(csv_error)?;
    for r in ds.records() {
        let mut row = vec![
            r.image_id.clone(),
            r.patient_id.clone(),
            r.truth.as_str().to_string(),
            r.probs[0].to_string(),
            r.probs[1].to_string(),
            r.probs[2].to_string(),
        ];
        for &slot in &present {
            row.push(optional_field(r, slot).clone().unwrap_or_default());
        }
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush().map_err(|e| DataError::Io(e.to_string()))
}

/// Parses the readers CSV; `(reader_id, image_id)` must be unique.
pub fn parse_readers<R: Read>(input: R) -> Result<Vec<ReaderRecord>, DataError> {
    let mut rdr = reader_for(input);
    let header = rdr.headers().map_err(csv_error)?.clone();
    let cols = Columns::resolve(&header, &READER_REQUIRED, &READER_OPTIONAL)?;
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let row = row_of(&rec);
        let field = |slot: usize| cols.get(&rec, slot).unwrap_or("");
        let malformed = |msg: String| DataError::Malformed { row, msg };
        let reader_id = field(0).to_string();
        let image_id = field(3).to_string();
        if reader_id.is_empty() || image_id.is_empty() {
            return Err(malformed("empty reader_id or image_id".into()));
        }
        let group: ReaderGroup = field(1).parse().map_err(malformed)?;
        let arm: Arm = field(2).parse().map_err(malformed)?;
        let pred: ClassLabel = field(4).parse().map_err(|_| DataError::UnknownLabel {
            row,
            value: field(4).to_string(),
        })?;
        let elapsed_s = match cols.get(&rec, 5).filter(|s| !s.is_empty()) {
            Some(s) => {
                let v = parse_f64(s, row, "elapsed_s")?;
                if v < 0.0 {
                    return Err(malformed(format!("negative elapsed_s {v}")));
                }
                Some(v)
            }
            None => None,
        };
        if !seen.insert((reader_id.clone(), image_id.clone())) {
            return Err(DataError::DuplicateResponse {
                row,
                reader_id,
                image_id,
            });
        }
        out.push(ReaderRecord {
            reader_id,
            group,
            arm,
            image_id,
            pred,
            elapsed_s,
        });
    }
    Ok(out)
}

pub fn write_readers<W: Write>(readers: &[ReaderRecord], out: W) -> Result<(), DataError> {
    let with_time = readers.iter().any(|r| r.elapsed_s.is_some());
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let mut header = READER_REQUIRED.to_vec();
    if with_time {
        header.push("elapsed_s");
    }
    w.write_record(&header).map_err(csv_error)?;
    for r in readers {
        let mut row = vec![
            r.reader_id.clone(),
            r.group.as_str().to_string(),
            r.arm.as_str().to_string(),
            r.image_id.clone(),
            r.pred.as_str().to_string(),
        ];
        if with_time {
            row.push(r.elapsed_s.map(|t| t.to_string()).unwrap_or_default());
        }
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush().map_err(|e| DataError::Io(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const FOUR_ROWS: &str = "image_id,patient_id,true_label,p_aegja,p_eegja,p_control\n\
        i1,p1,A-EGJA,0.7,0.2,0.1\n\
        i2,p1,A-EGJA,0.6,0.3,0.1\n\
        i3,p2,control,0.1,0.1,0.8\n\
        i4,p3,E-EGJA,0.2,0.7,0.1\n";

    #[test]
    fn parses_four_rows_three_patients() {
        let text = "image_id,patient_id,true_label,p_aegja,p_eegja,p_control\n\
            i1,p1,A-EGJA,0.7,0.2,0.1\n\
            i2,p1,E-EGJA,0.6,0.3,0.1\n";
        // p1 with two truths is a conflict
        assert!(matches!(
            parse_predictions(text.as_bytes(), true),
            Err(DataError::ConflictingTruth { .. })
        ));

        let parsed = parse_predictions(FOUR_ROWS.as_bytes(), true).unwrap();
        assert_eq!(parsed.dataset.len(), 4);
        assert_eq!(parsed.dataset.patient_count(), 3);
        assert_eq!(parsed.renormalized, 0);
    }

    #[test]
    fn labels_in_all_three_classes() {
        let text = "image_id,patient_id,true_label,p_aegja,p_eegja,p_control\n\
            i1,p1,A-EGJA,1,0,0\n\
            i2,p1,A-EGJA,1,0,0\n\
            i3,p2,E-EGJA,0,1,0\n\
            i4,p3,control,0,0,1\n";
        let ds = parse_predictions(text.as_bytes(), true).unwrap().dataset;
        let truths: Vec<_> = ds.records().iter().map(|r| r.truth).collect();
        assert_eq!(
            truths,
            vec![
                ClassLabel::Aegja,
                ClassLabel::Aegja,
                ClassLabel::Eegja,
                ClassLabel::Control
            ]
        );
        assert_eq!(ds.patient_count(), 3);
    }

    #[test]
    fn strict_sum_violation_reports_sum_and_row() {
        let text = "image_id,patient_id,true_label,p_aegja,p_eegja,p_control\n\
            i1,p1,A-EGJA,0.5,0.5,0.1\n";
        let err = parse_predictions(text.as_bytes(), true).unwrap_err();
        assert_eq!(err, DataError::ProbSum { row: 2, sum: 1.1 });
        assert!(err.to_string().contains("probability sum 1.1 exceeds tolerance"));
    }

    #[test]
    fn lenient_mode_renormalizes_and_counts() {
        let text = "image_id,patient_id,true_label,p_aegja,p_eegja,p_control\n\
            i1,p1,A-EGJA,0.3334,0.3333,0.3334\n";
        let parsed = parse_predictions(text.as_bytes(), false).unwrap();
        assert_eq!(parsed.renormalized, 1);
        let p = parsed.dataset.records()[0].probs;
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    type Matcher = fn(&DataError) -> bool;

    #[test]
    fn error_kinds() {
        let head = "image_id,patient_id,true_label,p_aegja,p_eegja,p_control\n";
        let cases: Vec<(&str, Matcher)> = vec![
            ("i1,p1,B-EGJA,1,0,0\n", |e| matches!(e, DataError::UnknownLabel { row: 2, .. })),
            ("i1,p1,control,1.2,-0.2,0\n", |e| matches!(e, DataError::ProbOutOfRange { .. })),
            ("i1,p1,control,x,0,1\n", |e| matches!(e, DataError::Malformed { row: 2, .. })),
            ("i1,p1,control,0,1\n", |e| matches!(e, DataError::Malformed { .. })),
            ("i1,p1,control,0,0,1\ni1,p2,control,0,0,1\n", |e| {
                matches!(e, DataError::DuplicateImage { row: 3, .. })
            }),
        ];
        for (body, check) in cases {
            let text = format!("{head}{body}");
            let err = parse_predictions(text.as_bytes(), true).unwrap_err();
            assert!(check(&err), "{body:?} gave {err:?}");
        }
        let bad_header = "image_id,patient,true_label,p_aegja,p_eegja,p_control\n";
        assert!(parse_predictions(bad_header.as_bytes(), true).is_err());
    }

    #[test]
    fn crlf_and_optional_columns() {
        let text = "image_id,patient_id,true_label,p_aegja,p_eegja,p_control,center,modality,sex,age\r\n\
            i1,p1,A-EGJA,1,0,0,H1,WLI,male,61\r\n\
            i2,p2,control,0,0,1,H2,NBI,,\r\n";
        let ds = parse_predictions(text.as_bytes(), true).unwrap().dataset;
        let r = &ds.records()[0];
        assert_eq!(r.center.as_deref(), Some("H1"));
        assert_eq!(r.modality.as_deref(), Some("WLI"));
        assert_eq!(r.age_years(), Some(61.0));
        assert_eq!(ds.records()[1].sex, None);
    }

    #[test]
    fn canonical_text_round_trips_bytewise() {
        let parsed = parse_predictions(FOUR_ROWS.as_bytes(), true).unwrap();
        let mut buf = Vec::new();
        write_predictions(&parsed.dataset, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, FOUR_ROWS);
    }

    #[test]
    fn readers_parse_and_reject_duplicates() {
        let text = "reader_id,group,arm,image_id,pred_label,elapsed_s\n\
            r1,trainee,A,i1,A-EGJA,3.5\n\
            r1,trainee,A,i2,control,\n";
        let rs = parse_readers(text.as_bytes()).unwrap();
        assert_eq!(rs.len(), 2);
        assert_eq!(rs[0].elapsed_s, Some(3.5));
        assert_eq!(rs[1].elapsed_s, None);

        let dup = "reader_id,group,arm,image_id,pred_label\n\
            r1,expert,B,i1,A-EGJA\n\
            r1,expert,B,i1,control\n";
        assert!(matches!(
            parse_readers(dup.as_bytes()),
            Err(DataError::DuplicateResponse { row: 3, .. })
        ));
    }
}

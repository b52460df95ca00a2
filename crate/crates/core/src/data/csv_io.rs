//! External score files.
//!
//! ```text
//! #range,1,100,dmos
//! sample_id,dataset,scene,mos
//! img001,live,natural-quality,37.5
//! ```

use std::fs;
use std::path::Path;

use super::{normalize_mos, DatasetSpec, Polarity};
use crate::error::{GammaError, Result};
use crate::prompts::Scene;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub raw_mos: f64,
    pub norm_mos: f64,
}

/// Scores of one dataset. Images are not part of the file.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    pub spec: DatasetSpec,
    pub records: Vec<ScoreRecord>,
}

const HEADER: [&str; 4] = ["sample_id", "dataset", "scene", "mos"];

pub fn load_scores_csv(path: impl AsRef<Path>) -> Result<ScoreTable> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| GammaError::io(format!("reading {}", path.display()), e))?;
    parse_scores(&text, &path.display().to_string())
}

fn parse_err(path: &str, line: usize, msg: impl Into<String>) -> GammaError {
    GammaError::Parse {
        path: path.into(),
        line,
        msg: msg.into(),
    }
}

fn parse_scores(text: &str, path: &str) -> Result<ScoreTable> {
    let mut lines = text.lines();
    let directive = lines.next().ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let fields: Vec<&str> = directive.split(',').map(str::trim).collect();
    let (lo, hi, polarity) = match fields.as_slice() {
        ["#range", lo, hi, pol] => {
            let num = |s: &str| s.parse::<f64>().map_err(|_| parse_err(path, 1, format!("bad range bound `{s}`")));
            (num(lo)?, num(hi)?, pol.parse::<Polarity>().map_err(|e| parse_err(path, 1, e.to_string()))?)
        }
        _ => return Err(parse_err(path, 1, "expected `#range,<low>,<high>,<polarity>`")),
    };

    let body: String = text.lines().skip(1).collect::<Vec<_>>().join("\n");
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(body.as_bytes());
    let header = reader.headers().map_err(|e| parse_err(path, 2, e.to_string()))?;
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(parse_err(path, 2, format!("expected header `{}`", HEADER.join(","))));
    }

    let mut meta: Option<(String, Scene)> = None;
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        // directive and header come first
        let line = i + 3;
        let rec = rec.map_err(|e| parse_err(path, line, e.to_string()))?;
        if rec.len() != 4 {
            return Err(parse_err(path, line, format!("expected 4 fields, found {}", rec.len())));
        }
        let scene: Scene = rec[2].parse().map_err(|e: GammaError| parse_err(path, line, e.to_string()))?;
        let mos: f64 = rec[3]
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad score `{}`", &rec[3])))?;
        match &meta {
            None => meta = Some((rec[1].to_string(), scene)),
            Some((d, s)) if d != &rec[1] || *s != scene => {
                return Err(parse_err(path, line, "every row must share one dataset and scene"));
            }
            Some(_) => {}
        }
        rows.push((rec[0].to_string(), mos, line));
    }
    let (name, scene) = meta.ok_or_else(|| parse_err(path, 2, "no score rows"))?;
    let spec = DatasetSpec {
        name,
        scene,
        mos_range: (lo, hi),
        polarity,
        size: rows.len(),
    };
    spec.validate()?;
    let records = rows
        .into_iter()
        .map(|(sample_id, raw, line)| {
            let norm_mos = normalize_mos(&spec, raw)
                .map_err(|e| GammaError::Input(format!("{path} line {line} (sample {sample_id}): {e}")))?;
            Ok(ScoreRecord {
                sample_id,
                raw_mos: raw,
                norm_mos,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreTable { spec, records })
}

pub fn write_scores_csv(path: impl AsRef<Path>, table: &ScoreTable) -> Result<()> {
    let path = path.as_ref();
    let s = &table.spec;
    let mut out = format!("#range,{},{},{}\n", s.mos_range.0, s.mos_range.1, s.polarity);
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| GammaError::Input(format!("writing {}: {e}", path.display()));
    w.write_record(HEADER).map_err(io)?;
    for r in &table.records {
        w.write_record([r.sample_id.as_str(), &s.name, s.scene.name(), &r.raw_mos.to_string()])
            .map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| GammaError::Input(e.to_string()))?;
    out.push_str(&String::from_utf8(bytes).expect("csv writer emits utf-8"));
    fs::write(path, out).map_err(|e| GammaError::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = "#range,1,5,mos\nsample_id,dataset,scene,mos\na,koniq,natural-quality,1\nb,koniq,natural-quality,4\nc,koniq,natural-quality,5\n";

    #[test]
    fn three_rows() {
        let t = parse_scores(GOOD, "x.csv").unwrap();
        assert_eq!(t.records.len(), 3);
        assert_eq!(t.spec.size, 3);
        assert_eq!(t.spec.scene, Scene::NaturalQuality);
        assert_eq!(t.records[1].norm_mos, 0.75);
    }

    #[test]
    fn out_of_range_names_the_row() {
        let bad = GOOD.replace("b,koniq,natural-quality,4", "b,koniq,natural-quality,7");
        let e = parse_scores(&bad, "x.csv").unwrap_err();
        assert!(matches!(e, GammaError::Input(ref m) if m.contains("line 4") && m.contains("sample b")), "{e}");
    }

    #[test]
    fn malformed_rows_report_lines() {
        let cases = [
            (GOOD.replace("c,koniq,natural-quality,5", "c,koniq,natural-quality,high"), 5),
            (GOOD.replace("a,koniq,natural-quality,1", "a,koniq,1"), 3),
            (GOOD.replace("b,koniq,natural", "b,other,natural"), 4),
            (GOOD.replace("a,koniq,natural-quality", "a,koniq,moon"), 3),
            (GOOD.replace("#range,1,5,mos", "#range,1,5,best"), 1),
            (GOOD.replace("sample_id,dataset", "id,dataset"), 2),
        ];
        for (text, line) in cases {
            match parse_scores(&text, "x.csv") {
                Err(GammaError::Parse { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{other:?} for {text}"),
            }
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let spec = DatasetSpec {
            name: "live".into(),
            scene: Scene::NaturalQuality,
            mos_range: (1.0, 100.0),
            polarity: Polarity::Dmos,
            size: 3,
        };
        let records = [1.0, 37.123456789, 100.0]
            .iter()
            .enumerate()
            .map(|(i, &raw)| ScoreRecord {
                sample_id: format!("s{i}"),
                raw_mos: raw,
                norm_mos: normalize_mos(&spec, raw).unwrap(),
            })
            .collect();
        let table = ScoreTable { spec, records };
        write_scores_csv(&p, &table).unwrap();
        let back = load_scores_csv(&p).unwrap();
        assert_eq!(back.spec, table.spec);
        for (a, b) in back.records.iter().zip(&table.records) {
            assert!((a.norm_mos - b.norm_mos).abs() <= 1e-12);
        }
        assert!(matches!(load_scores_csv(dir.path().join("missing.csv")), Err(GammaError::Io { .. })));
    }
}

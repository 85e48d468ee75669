use std::fmt::Write as _;
use std::path::Path;

use super::{LabeledSample, SampleInput};
use crate::error::{Error, Result};

/// Contents of an embedding file. Every sample carries a feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingFile {
    pub dim: usize,
    pub samples: Vec<LabeledSample>,
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

fn parse_header(line: &str) -> Result<(usize, usize)> {
    let mut dim = None;
    let mut count = None;
    for field in line.split_whitespace() {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| parse_err(1, format!("header field `{field}` is not key=value")))?;
        let v: usize = v
            .parse()
            .map_err(|_| parse_err(1, format!("header value `{v}` is not an integer")))?;
        match k {
            "dim" => dim = Some(v),
            "count" => count = Some(v),
            _ => return Err(parse_err(1, format!("unknown header key `{k}`"))),
        }
    }
    match (dim, count) {
        (Some(d), Some(c)) if d > 0 => Ok((d, c)),
        (Some(0), _) => Err(parse_err(1, "dim must be positive")),
        _ => Err(parse_err(1, "header must be `dim=<d> count=<n>`")),
    }
}

fn parse_binary(field: &str, what: &str, line: usize) -> Result<u8> {
    match field.trim() {
        "0" => Ok(0),
        "1" => Ok(1),
        f => Err(parse_err(line, format!("{what} `{f}` is not 0 or 1"))),
    }
}

pub fn parse_embeddings(text: &str) -> Result<EmbeddingFile> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    let (dim, count) = parse_header(header)?;
    let mut samples = Vec::with_capacity(count);
    for (i, line) in lines.enumerate() {
        let no = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 2 {
            return Err(parse_err(
                no,
                format!(
                    "expected {} values (dim={dim}), found {}",
                    dim,
                    fields.len().saturating_sub(2)
                ),
            ));
        }
        let y = parse_binary(fields[0], "label", no)?;
        let g = parse_binary(fields[1], "group", no)?;
        let values = fields[2..]
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(no, format!("`{f}` is not a finite number")))
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(LabeledSample {
            input: SampleInput::Features(values),
            y,
            g,
        });
    }
    if samples.len() != count {
        return Err(parse_err(
            1,
            format!("header declares count={count}, found {} rows", samples.len()),
        ));
    }
    Ok(EmbeddingFile { dim, samples })
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(&text)
}

/// Serialises samples (pixels or features, flattened) in the embedding
/// format. All samples must share a width.
pub fn format_embeddings(samples: &[LabeledSample]) -> Result<String> {
    let dim = samples.first().map_or(0, |s| s.values().len());
    if dim == 0 {
        return Err(Error::invalid("nothing to write: no samples or zero-width input"));
    }
    let mut out = format!("dim={dim} count={}\n", samples.len());
    for s in samples {
        if s.values().len() != dim {
            return Err(Error::shape("format_embeddings", "samples differ in width"));
        }
        write!(out, "{},{}", s.y, s.g).expect("writing to a String");
        for v in s.values() {
            write!(out, ",{v}").expect("writing to a String");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_embeddings(path: &Path, samples: &[LabeledSample]) -> Result<()> {
    let text = format_embeddings(samples)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    #[test]
    fn three_rows() {
        let f = parse_embeddings("dim=2 count=3\n1,0,0.5,-1\n0,1,2e-3,3\n1,1,0,0\n").unwrap();
        assert_eq!(f.dim, 2);
        assert_eq!(f.samples.len(), 3);
        assert_eq!(f.samples[0].values(), &[0.5, -1.0]);
        assert_eq!((f.samples[1].y, f.samples[1].g), (0, 1));
        assert_eq!(f.samples[1].values(), &[0.002, 3.0]);
    }

    #[test]
    fn wrong_dimension_names_both() {
        let err = parse_embeddings("dim=3 count=1\n1,0,0.5,1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2") && msg.contains("expected 3") && msg.contains("found 2"), "{msg}");
        assert!(parse_embeddings("dim=x count=1\n").is_err());
        assert!(parse_embeddings("dim=1 count=2\n1,0,1\n").is_err());
        assert!(parse_embeddings("dim=1 count=1\n2,0,1\n").is_err());
        assert!(parse_embeddings("dim=1 count=1\n1,0,nan\n").is_err());
    }

    #[test]
    fn round_trip() {
        let d = generate_synthetic(&SyntheticSpec {
            n: 5,
            ..Default::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.txt");
        write_embeddings(&p, &d).unwrap();
        let back = load_embeddings(&p).unwrap();
        assert_eq!(back.dim, 1024);
        for (a, b) in d.iter().zip(&back.samples) {
            assert_eq!(a.values(), b.values());
            assert_eq!((a.y, a.g), (b.y, b.g));
        }
        let again = format_embeddings(&back.samples).unwrap();
        assert_eq!(again, std::fs::read_to_string(&p).unwrap());
    }
}

//! Description files: one record per line, `class_id` followed by either a
//! double-quoted string or a whitespace-separated vector of floats.
//!
//! ```text
//! # comments and blank lines are ignored
//! 4 "a small bird with a bright red crest"
//! 7 0.125 -0.5 1e-3
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Dataset, Description, DescriptionCorpus, SplitKind};
use crate::error::{Error, Result};
use crate::ClassId;

/// Parses description records; errors carry `path` and the 1-based line.
pub fn parse_descriptions(text: &str, path: &Path) -> Result<DescriptionCorpus> {
    let malformed = |line: usize, message: String| Error::Malformed {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut entries: BTreeMap<ClassId, Vec<Description>> = BTreeMap::new();
    let mut dim: Option<usize> = None;
    let mut text_kind: Option<bool> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id_str, rest) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| malformed(line_no, "expected `class_id description`".into()))?;
        let class = id_str
            .parse::<u32>()
            .map(ClassId)
            .map_err(|e| malformed(line_no, format!("bad class id `{id_str}`: {e}")))?;
        let rest = rest.trim();
        let desc = if rest.starts_with('"') {
            Description::Text(parse_quoted(rest).map_err(|m| malformed(line_no, m))?)
        } else {
            let v = rest
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|e| malformed(line_no, format!("bad float `{t}`: {e}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            if v.is_empty() {
                return Err(malformed(line_no, "empty embedding vector".into()));
            }
            if let Some(x) = v.iter().find(|x| !x.is_finite()) {
                return Err(malformed(line_no, format!("non-finite value {x}")));
            }
            match dim {
                None => dim = Some(v.len()),
                Some(expected) if expected != v.len() => {
                    return Err(Error::MixedDimensions {
                        expected,
                        found: v.len(),
                        line: line_no,
                    })
                }
                _ => {}
            }
            Description::Vector(v)
        };
        let is_text = matches!(desc, Description::Text(_));
        match text_kind {
            None => text_kind = Some(is_text),
            Some(prev) if prev != is_text => {
                return Err(Error::MixedDescriptionKinds(format!(
                    "{}:{line_no}: file mixes quoted text and vectors",
                    path.display()
                )))
            }
            _ => {}
        }
        entries.entry(class).or_default().push(desc);
    }
    DescriptionCorpus::new(entries)
}

fn parse_quoted(s: &str) -> std::result::Result<String, String> {
    let mut out = String::new();
    let mut chars = s.chars();
    chars.next(); // opening quote
    loop {
        match chars.next() {
            None => return Err("unterminated string".into()),
            Some('"') => break,
            Some('\\') => match chars.next() {
                Some('"') => out.push('"'),
                Some('\\') => out.push('\\'),
                Some('n') => out.push('\n'),
                other => return Err(format!("bad escape {other:?}")),
            },
            Some(c) => out.push(c),
        }
    }
    let trailing: String = chars.collect();
    if !trailing.trim().is_empty() {
        return Err(format!("trailing text after string: `{}`", trailing.trim()));
    }
    Ok(out)
}

/// Loads descriptions for `dataset`: every base class needs at least one,
/// and every listed class must exist in the dataset.
pub fn load_descriptions(path: &Path, dataset: &Dataset) -> Result<DescriptionCorpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let corpus = parse_descriptions(&text, path)?;
    for class in corpus.classes() {
        if dataset.split().kind_of(class).is_none() {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                line: first_line_of(&text, class),
                message: format!("class {class} is not in the dataset"),
            });
        }
    }
    corpus.require_classes(dataset.classes(SplitKind::Base))?;
    Ok(corpus)
}

fn first_line_of(text: &str, class: ClassId) -> usize {
    text.lines()
        .position(|l| {
            l.split_whitespace()
                .next()
                .and_then(|t| t.parse::<u32>().ok())
                == Some(class.0)
        })
        .map_or(0, |i| i + 1)
}

/// Serializes a corpus in the line format accepted by [`parse_descriptions`].
/// Floats use the shortest representation that parses back exactly.
pub fn write_descriptions(corpus: &DescriptionCorpus, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (class, list) in corpus.entries() {
        for d in list {
            match d {
                Description::Text(t) => {
                    let escaped = t
                        .replace('\\', "\\\\")
                        .replace('"', "\\\"")
                        .replace('\n', "\\n");
                    let _ = writeln!(out, "{class} \"{escaped}\"");
                }
                Description::Vector(v) => {
                    let _ = write!(out, "{class}");
                    for x in v {
                        let _ = write!(out, " {x:?}");
                    }
                    out.push('\n');
                }
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{DatasetSplit, DescriptionKind, ImageShape, LabeledExample};

    fn dataset(base: &[u32], novel: &[u32]) -> Dataset {
        let split = DatasetSplit::new(
            base.iter().map(|&c| ClassId(c)),
            [],
            novel.iter().map(|&c| ClassId(c)),
        )
        .unwrap();
        let examples = base
            .iter()
            .chain(novel)
            .map(|&c| LabeledExample {
                image: vec![0.5],
                class_id: ClassId(c),
            })
            .collect();
        Dataset::new(ImageShape::new(1, 1, 1), examples, split).unwrap()
    }

    #[test]
    fn three_descriptions_per_base_class() {
        let ds = dataset(&[0, 1, 2, 3, 4, 5], &[6]);
        let mut text = String::new();
        for c in 0..6 {
            for k in 0..3 {
                text.push_str(&format!("{c} \"class {c} description {k}\"\n"));
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.txt");
        fs::write(&p, text).unwrap();
        let corpus = load_descriptions(&p, &ds).unwrap();
        assert_eq!(corpus.kind(), DescriptionKind::Text);
        for c in 0..6 {
            assert_eq!(corpus.count(ClassId(c)), 3);
        }
        assert_eq!(corpus.count(ClassId(6)), 0);
    }

    #[test]
    fn missing_base_class_is_named() {
        let ds = dataset(&[0, 1, 2], &[3]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.txt");
        fs::write(&p, "0 \"a\"\n2 \"b\"\n").unwrap();
        let err = load_descriptions(&p, &ds).unwrap_err();
        assert!(
            matches!(err, Error::MissingDescriptions { class_id: ClassId(1) }),
            "{err}"
        );
    }

    #[test]
    fn vector_width_is_recorded_and_ragged_rejected() {
        let p = Path::new("mem");
        let row: String = (0..512).map(|i| format!(" {}", i as f64 / 512.0)).collect();
        let corpus = parse_descriptions(&format!("0{row}\n1{row}\n"), p).unwrap();
        assert_eq!(corpus.dim(), Some(512));
        assert_eq!(corpus.kind(), DescriptionKind::Vector);

        let err = parse_descriptions("0 1 2 3\n# c\n1 1 2\n", p).unwrap_err();
        assert!(
            matches!(err, Error::MixedDimensions { expected: 3, found: 2, line: 3 }),
            "{err}"
        );
        let err = parse_descriptions("0 1 2\n1 \"text\"\n", p).unwrap_err();
        assert!(matches!(err, Error::MixedDescriptionKinds(_)));
    }

    #[test]
    fn quoted_strings_and_errors() {
        let p = Path::new("mem");
        let c = parse_descriptions(r#"3 "says \"hi\" \\ ok""#, p).unwrap();
        assert_eq!(
            c.descriptions(ClassId(3)),
            &[Description::Text(r#"says "hi" \ ok"#.into())]
        );
        assert!(matches!(
            parse_descriptions("3 \"open", p),
            Err(Error::Malformed { line: 1, .. })
        ));
        assert!(matches!(
            parse_descriptions("x 1.0", p),
            Err(Error::Malformed { line: 1, .. })
        ));
        assert!(matches!(
            parse_descriptions("\n1 1.0 abc", p),
            Err(Error::Malformed { line: 2, .. })
        ));
    }

    #[test]
    fn unknown_class_rejected() {
        let ds = dataset(&[0], &[]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.txt");
        fs::write(&p, "0 \"a\"\n9 \"b\"\n").unwrap();
        assert!(matches!(
            load_descriptions(&p, &ds),
            Err(Error::Malformed { line: 2, .. })
        ));
    }

    #[test]
    fn write_parse_round_trip() {
        let p = Path::new("mem");
        let src = "0 0.1 -2.5e-7 3\n0 1 2 3\n5 0.30000000000000004 0 0\n";
        let corpus = parse_descriptions(src, p).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("d.txt");
        write_descriptions(&corpus, &out).unwrap();
        let back = parse_descriptions(&fs::read_to_string(&out).unwrap(), p).unwrap();
        assert_eq!(back, corpus);

        let t = parse_descriptions("1 \"quote \\\" and \\\\ slash\"\n", p).unwrap();
        write_descriptions(&t, &out).unwrap();
        assert_eq!(
            parse_descriptions(&fs::read_to_string(&out).unwrap(), p).unwrap(),
            t
        );
    }
}

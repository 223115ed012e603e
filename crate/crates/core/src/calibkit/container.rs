//! Calibration set file: a JSON header line followed by one JSON line per example.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CalibrationSet, Example, Tokenizer};
use crate::error::{QlabError, Result};

pub const CALIB_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    strategy: String,
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "T")]
    t: usize,
    seed: u64,
    tokenizer: Tokenizer,
    langs: Vec<String>,
    mix_fraction: Option<f64>,
}

pub fn calibration_to_string(set: &CalibrationSet) -> Result<String> {
    let header = Header {
        version: CALIB_VERSION,
        strategy: set.strategy.to_string(),
        n: set.n,
        t: set.t,
        seed: set.seed,
        tokenizer: set.tokenizer,
        langs: set.langs.clone(),
        mix_fraction: set.mix_fraction,
    };
    let mut out = serde_json::to_string(&header)?;
    out.push('\n');
    for e in &set.examples {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_calibration(set: &CalibrationSet, path: &Path) -> Result<()> {
    set.validate()?;
    fs::write(path, calibration_to_string(set)?)?;
    Ok(())
}

pub fn read_calibration(path: &Path) -> Result<CalibrationSet> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => QlabError::MissingInput(path.to_path_buf()),
        _ => QlabError::Io(e),
    })?;
    let parse_err = |line: usize, message: String| QlabError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or_else(|| parse_err(1, "missing header".into()))?;
    let header: Header = serde_json::from_str(first).map_err(|e| parse_err(1, e.to_string()))?;
    if header.version != CALIB_VERSION {
        return Err(parse_err(1, format!("unsupported version {}", header.version)));
    }
    let mut examples = Vec::with_capacity(header.n);
    for (i, line) in lines {
        let ex: Example = serde_json::from_str(line).map_err(|e| parse_err(i + 1, e.to_string()))?;
        examples.push(ex);
    }
    let set = CalibrationSet {
        examples,
        n: header.n,
        t: header.t,
        strategy: header.strategy.parse()?,
        seed: header.seed,
        tokenizer: header.tokenizer,
        langs: header.langs,
        mix_fraction: header.mix_fraction,
    };
    set.validate()?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibkit::{build_single, BuildParams, Corpus, Document};

    #[test]
    fn header_layout_and_round_trip() {
        let mut c = Corpus::new();
        c.push(Document::new("hello world, hello calibration", "en", "t").unwrap());
        let set = build_single(&c, "en", &BuildParams::new(3, 5, 2)).unwrap();
        let text = calibration_to_string(&set).unwrap();
        let header = text.lines().next().unwrap();
        assert_eq!(
            header,
            r#"{"version":1,"strategy":"single:en","N":3,"T":5,"seed":2,"tokenizer":"byte_level","langs":["en"],"mix_fraction":null}"#
        );
        assert!(text.lines().nth(1).unwrap().starts_with(r#"{"lang":"en","ids":[104,"#));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        write_calibration(&set, &path).unwrap();
        let back = read_calibration(&path).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn rejects_wrong_lengths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(
            &path,
            "{\"version\":1,\"strategy\":\"multi\",\"N\":1,\"T\":3,\"seed\":0,\"tokenizer\":\"byte_level\",\"langs\":[],\"mix_fraction\":null}\n{\"lang\":\"en\",\"ids\":[1,2]}\n",
        )
        .unwrap();
        assert!(matches!(read_calibration(&path), Err(QlabError::ShapeMismatch(_))));
    }
}

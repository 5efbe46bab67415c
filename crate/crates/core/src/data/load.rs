use super::{DataError, Dataset, Instance, Split, MAX_CHOICES, MIN_CHOICES};
use serde::Deserialize;
use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

#[derive(Deserialize)]
struct RawInstance {
    id: Option<String>,
    question: Option<String>,
    choices: Option<Vec<String>>,
    rationales: Option<Vec<String>>,
    gold_index: Option<i64>,
}

/// Reads a JSONL dataset. The dataset name is the file stem.
///
/// Any malformed line rejects the whole file; errors carry 1-based line
/// numbers.
pub fn load_dataset(path: &Path, split: Split) -> Result<Dataset, DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    parse_dataset(BufReader::new(file), &name, split).map_err(|e| match e {
        DataError::Io { source, .. } => DataError::io(path, source),
        DataError::EmptyDataset(_) => DataError::EmptyDataset(path.display().to_string()),
        other => other,
    })
}

/// Writes one instance per line, the format [`load_dataset`] reads.
pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<(), DataError> {
    let mut text = String::new();
    for inst in &dataset.instances {
        text.push_str(&super::report::to_json_line(inst));
        text.push('\n');
    }
    super::report::write_text(path, &text)
}

pub fn parse_dataset(reader: impl BufRead, name: &str, split: Split) -> Result<Dataset, DataError> {
    let mut instances = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| DataError::io(name, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let instance = parse_line(&line, line_no)?;
        if !seen.insert(instance.id.clone()) {
            return Err(DataError::DuplicateId {
                line: line_no,
                id: instance.id,
            });
        }
        instances.push(instance);
    }
    if instances.is_empty() {
        return Err(DataError::EmptyDataset(name.to_string()));
    }
    Ok(Dataset {
        name: name.to_string(),
        split,
        instances,
    })
}

fn parse_line(line: &str, line_no: usize) -> Result<Instance, DataError> {
    let raw: RawInstance = serde_json::from_str(line).map_err(|e| DataError::MalformedLine {
        line: line_no,
        message: e.to_string(),
    })?;
    let missing = |field| DataError::MissingField {
        line: line_no,
        field,
    };
    let id = raw.id.ok_or_else(|| missing("id"))?;
    let question = raw.question.ok_or_else(|| missing("question"))?;
    let choices = raw.choices.ok_or_else(|| missing("choices"))?;
    let rationales = raw.rationales.ok_or_else(|| missing("rationales"))?;
    let gold = raw.gold_index.ok_or_else(|| missing("gold_index"))?;

    let k = choices.len();
    if !(MIN_CHOICES..=MAX_CHOICES).contains(&k) {
        return Err(DataError::ChoiceCountOutOfRange {
            line: line_no,
            count: k,
        });
    }
    if rationales.len() != k {
        return Err(DataError::RationaleCountMismatch {
            line: line_no,
            choices: k,
            rationales: rationales.len(),
        });
    }
    if gold < 0 || gold as usize >= k {
        return Err(DataError::GoldIndexOutOfRange {
            line: line_no,
            index: gold,
            k,
        });
    }
    Ok(Instance {
        id,
        question,
        choices,
        rationales,
        gold_index: gold as usize,
    })
}

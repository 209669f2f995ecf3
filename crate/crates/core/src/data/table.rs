use std::path::Path;

use super::{Catalog, ClassificationSample, DataError};

/// Writes `sample_id,dataset_id,label,f0,...,f{D-1}`. Floats use the shortest
/// representation that parses back to the same bits.
pub fn write_feature_table(path: &Path, samples: &[ClassificationSample]) -> Result<(), DataError> {
    let dims = samples.first().map_or(0, |s| s.features.len());
    let mut out = String::from("sample_id,dataset_id,label");
    for j in 0..dims {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for s in samples {
        if s.features.len() != dims {
            return Err(DataError::InvalidConfig(format!(
                "sample {} has {} features, expected {dims}",
                s.sample_id,
                s.features.len()
            )));
        }
        if s.sample_id.contains([',', '"', '\n']) || s.dataset_id.contains([',', '"', '\n']) {
            return Err(DataError::InvalidConfig(format!("identifier {:?} needs quoting", s.sample_id)));
        }
        out.push_str(&format!("{},{},{}", s.sample_id, s.dataset_id, s.label));
        for v in &s.features {
            out.push_str(&format!(",{v:?}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| DataError::io(path, e))
}

/// Parses a feature table, validating widths, numbers, dataset ids and labels.
pub fn load_feature_table(path: &Path, catalog: &Catalog) -> Result<Vec<ClassificationSample>, DataError> {
    let file = std::fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(file);
    let parse_err = |line: u64, msg: String| DataError::Parse { path: path.to_path_buf(), line, msg };

    let mut records = reader.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| parse_err(1, e.to_string()))?,
        None => return Err(parse_err(1, "missing header".into())),
    };
    if header.len() < 4 || &header[0] != "sample_id" || &header[1] != "dataset_id" || &header[2] != "label" {
        return Err(parse_err(1, "header must be sample_id,dataset_id,label,f0,...".into()));
    }
    let dims = header.len() - 3;
    for (j, name) in header.iter().skip(3).enumerate() {
        if name != format!("f{j}") {
            return Err(parse_err(1, format!("expected column f{j}, found {name:?}")));
        }
    }

    let mut out = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != dims + 3 {
            return Err(parse_err(line, format!("expected {} fields, found {}", dims + 3, rec.len())));
        }
        let dataset_id = rec[1].to_string();
        let spec = catalog.get(&dataset_id).map_err(|_| parse_err(line, format!("unknown dataset_id {dataset_id:?}")))?;
        let label: usize = rec[2].parse().map_err(|_| parse_err(line, format!("label {:?} is not an index", &rec[2])))?;
        if label >= spec.num_classes() {
            return Err(parse_err(line, format!("label {label} out of range for {dataset_id}")));
        }
        let features = rec
            .iter()
            .skip(3)
            .enumerate()
            .map(|(j, f)| {
                f.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(line, format!("f{j} = {f:?} is not a finite number")))
            })
            .collect::<Result<Vec<f64>, _>>()?;
        out.push(ClassificationSample { sample_id: rec[0].to_string(), features, dataset_id, label });
    }
    Ok(out)
}

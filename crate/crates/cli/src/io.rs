//! File formats: support JSON, overlap and value CSVs, draws, predictions.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use mscos::model::{ModelSpec, Param};
use mscos::predict::PredictionResult;
use mscos::sampler::PosteriorDraws;
use mscos::supports::{ArealSupport, OverlapRow, OverlapTable};
use serde::{Deserialize, Serialize};

use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn parse_f64(s: &str, path: &Path, line: u64, what: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| CliError::Usage(format!("{}:{line}: {what} `{s}` is not a number", path.display())))
}

fn csv_reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new().has_headers(true).flexible(false).trim(csv::Trim::All).from_reader(text.as_bytes())
}

fn check_header(rdr: &mut csv::Reader<&[u8]>, expected: &[&str], path: &Path) -> Result<()> {
    let header = rdr.headers().map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    if header.iter().ne(expected.iter().copied()) {
        return Err(CliError::Usage(format!(
            "{}: expected header `{}`, found `{}`",
            path.display(),
            expected.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    Ok(())
}

fn records(rdr: &mut csv::Reader<&[u8]>, path: &Path) -> Result<Vec<(u64, csv::StringRecord)>> {
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let line = rec.position().map_or(0, |p| p.line());
        out.push((line, rec));
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SupportUnit {
    id: String,
    area: f64,
    centroid: [f64; 2],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SupportFile {
    units: Vec<SupportUnit>,
    #[serde(default)]
    edges: Vec<(String, String)>,
}

pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    let mut de = serde_json::Deserializer::from_str(text);
    let value = serde_path_to_error::deserialize(&mut de)
        .map_err(|e| CliError::Usage(format!("{}: at `{}`: {}", path.display(), e.path(), e.inner())))?;
    de.end().map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    Ok(value)
}

/// Support JSON: `{"units": [{"id", "area", "centroid": [x, y]}], "edges": [[a, b]]}`.
pub fn read_support(path: &Path) -> Result<ArealSupport> {
    let f: SupportFile = parse_json(&read_text(path)?, path)?;
    let (ids, (areas, centroids)): (Vec<String>, (Vec<f64>, Vec<[f64; 2]>)) =
        f.units.into_iter().map(|u| (u.id, (u.area, u.centroid))).unzip();
    ArealSupport::with_id_edges(ids, areas, centroids, &f.edges)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn write_support(path: &Path, s: &ArealSupport) -> Result<()> {
    let f = SupportFile {
        units: (0..s.len())
            .map(|k| SupportUnit { id: s.ids()[k].clone(), area: s.areas()[k], centroid: s.centroids()[k] })
            .collect(),
        edges: s.edges().into_iter().map(|(a, b)| (s.ids()[a].clone(), s.ids()[b].clone())).collect(),
    };
    write_text(path, &(serde_json::to_string_pretty(&f).expect("serializable") + "\n"))
}

/// Overlap CSV: `fine_id,coarse_id,overlap_area`.
pub fn read_overlaps(path: &Path) -> Result<OverlapTable> {
    let text = read_text(path)?;
    let mut rdr = csv_reader(&text);
    check_header(&mut rdr, &["fine_id", "coarse_id", "overlap_area"], path)?;
    let mut rows = Vec::new();
    for (line, rec) in records(&mut rdr, path)? {
        rows.push(OverlapRow {
            fine_id: rec[0].to_string(),
            coarse_id: rec[1].to_string(),
            overlap_area: parse_f64(&rec[2], path, line, "overlap_area")?,
        });
    }
    OverlapTable::new(rows).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn write_overlaps(path: &Path, rows: &[OverlapRow]) -> Result<()> {
    let mut out = String::from("fine_id,coarse_id,overlap_area\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.fine_id, r.coarse_id, r.overlap_area));
    }
    write_text(path, &out)
}

/// Value CSV `unit_id,value` (empty value = missing), aligned to `ids`.
/// Every id must appear exactly once.
pub fn read_values(path: &Path, ids: &[String]) -> Result<Vec<Option<f64>>> {
    let text = read_text(path)?;
    let mut rdr = csv_reader(&text);
    check_header(&mut rdr, &["unit_id", "value"], path)?;
    let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(k, id)| (id.as_str(), k)).collect();
    let mut out: Vec<Option<Option<f64>>> = vec![None; ids.len()];
    for (line, rec) in records(&mut rdr, path)? {
        let id = &rec[0];
        let k = *index
            .get(id)
            .ok_or_else(|| CliError::Usage(format!("{}:{line}: unit `{id}` is not in the support", path.display())))?;
        if out[k].is_some() {
            return Err(CliError::Usage(format!("{}:{line}: unit `{id}` appears twice", path.display())));
        }
        let v = if rec[1].is_empty() { None } else { Some(parse_f64(&rec[1], path, line, "value")?) };
        out[k] = Some(v);
    }
    if let Some(k) = out.iter().position(Option::is_none) {
        return Err(CliError::Usage(format!(
            "{}: {} of {} support units have no row (first missing: `{}`)",
            path.display(),
            out.iter().filter(|v| v.is_none()).count(),
            ids.len(),
            ids[k]
        )));
    }
    Ok(out.into_iter().map(|v| v.expect("checked")).collect())
}

pub fn write_values(path: &Path, ids: &[String], values: &[Option<f64>]) -> Result<()> {
    let mut out = String::from("unit_id,value\n");
    for (id, v) in ids.iter().zip(values) {
        match v {
            Some(v) => out.push_str(&format!("{id},{v}\n")),
            None => out.push_str(&format!("{id},\n")),
        }
    }
    write_text(path, &out)
}

/// Draws CSV: `draw`, one column per scalar parameter, then `process_<k>`.
pub fn write_draws(path: &Path, d: &PosteriorDraws) -> Result<()> {
    let mut out = String::from("draw");
    for p in &d.params {
        out.push(',');
        out.push_str(p.name());
    }
    let dim = d.process.first().map_or(0, Vec::len);
    for k in 0..dim {
        out.push_str(&format!(",process_{k}"));
    }
    out.push('\n');
    for s in 0..d.len() {
        out.push_str(&s.to_string());
        for col in &d.scalars {
            out.push_str(&format!(",{}", col[s]));
        }
        for v in &d.process[s] {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    write_text(path, &out)
}

/// Per-chain metadata kept in the fit manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainMeta {
    pub chain: usize,
    pub seed: u64,
    pub file: String,
    pub n_draws: usize,
    pub acceptance: BTreeMap<String, f64>,
    pub final_steps: BTreeMap<String, f64>,
}

/// Reads a draws file written for `spec`; column names must match the
/// model's parameters and process dimension.
pub fn read_draws(path: &Path, spec: &ModelSpec, meta: &ChainMeta, config: &mscos::sampler::McmcConfig) -> Result<PosteriorDraws> {
    let text = read_text(path)?;
    let mut rdr = csv_reader(&text);
    let params = spec.scalar_params();
    let mut expected: Vec<String> = vec!["draw".into()];
    expected.extend(params.iter().map(|p| p.name().to_string()));
    expected.extend((0..spec.process_dim()).map(|k| format!("process_{k}")));
    let exp_ref: Vec<&str> = expected.iter().map(String::as_str).collect();
    check_header(&mut rdr, &exp_ref, path).map_err(|e| match e {
        CliError::Usage(m) => CliError::Usage(format!("draws do not match the configured model: {m}")),
        other => other,
    })?;
    let mut scalars = vec![Vec::new(); params.len()];
    let mut process = Vec::new();
    for (line, rec) in records(&mut rdr, path)? {
        for (k, col) in scalars.iter_mut().enumerate() {
            col.push(parse_f64(&rec[k + 1], path, line, params[k].name())?);
        }
        let mut row = Vec::with_capacity(spec.process_dim());
        for j in 0..spec.process_dim() {
            row.push(parse_f64(&rec[1 + params.len() + j], path, line, "process")?);
        }
        process.push(row);
    }
    if process.len() != meta.n_draws {
        return Err(CliError::Usage(format!(
            "{}: {} draws found but the manifest records {}",
            path.display(),
            process.len(),
            meta.n_draws
        )));
    }
    let named = |m: &BTreeMap<String, f64>| -> Vec<(Param, f64)> {
        m.iter().filter_map(|(k, v)| Param::from_name(k).map(|p| (p, *v))).collect()
    };
    Ok(PosteriorDraws {
        kind: spec.kind(),
        params,
        scalars,
        process,
        acceptance: named(&meta.acceptance),
        final_steps: named(&meta.final_steps),
        seed: meta.seed,
        chain: meta.chain,
        config: config.clone(),
    })
}

pub fn variable_name(v: usize) -> &'static str {
    if v == 0 {
        "y1"
    } else {
        "y2"
    }
}

/// Prediction CSV `unit_id,variable,mean,sd,lo95,hi95`.
pub fn write_predictions(path: &Path, r: &PredictionResult) -> Result<()> {
    let mut out = String::from("unit_id,variable,mean,sd,lo95,hi95\n");
    for &v in &r.variables {
        for (id, s) in r.unit_ids.iter().zip(&r.summaries[v]) {
            out.push_str(&format!("{id},{},{},{},{},{}\n", variable_name(v), s.mean, s.sd, s.lo95, s.hi95));
        }
    }
    write_text(path, &out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub unit_id: String,
    pub variable: String,
    pub mean: f64,
    pub sd: f64,
    pub lo95: f64,
    pub hi95: f64,
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let text = read_text(path)?;
    let mut rdr = csv_reader(&text);
    check_header(&mut rdr, &["unit_id", "variable", "mean", "sd", "lo95", "hi95"], path)?;
    let mut out = Vec::new();
    for (line, rec) in records(&mut rdr, path)? {
        out.push(PredictionRow {
            unit_id: rec[0].to_string(),
            variable: rec[1].to_string(),
            mean: parse_f64(&rec[2], path, line, "mean")?,
            sd: parse_f64(&rec[3], path, line, "sd")?,
            lo95: parse_f64(&rec[4], path, line, "lo95")?,
            hi95: parse_f64(&rec[5], path, line, "hi95")?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use mscos::supports::{build_grid_support, Rect};

    #[test]
    fn support_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.json");
        let s = build_grid_support(2, 3, Rect::UNIT).unwrap();
        write_support(&p, &s).unwrap();
        let back = read_support(&p).unwrap();
        assert_eq!(back.ids(), s.ids());
        assert_eq!(back.edges(), s.edges());
        assert_eq!(back.areas(), s.areas());
    }

    #[test]
    fn values_need_every_unit_once() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.csv");
        let ids: Vec<String> = vec!["a".into(), "b".into()];
        write_text(&p, "unit_id,value\nb,2.5\na,\n").unwrap();
        assert_eq!(read_values(&p, &ids).unwrap(), vec![None, Some(2.5)]);
        write_text(&p, "unit_id,value\na,1\n").unwrap();
        assert!(read_values(&p, &ids).is_err());
        write_text(&p, "unit_id,value\na,1\na,2\nb,3\n").unwrap();
        assert!(read_values(&p, &ids).is_err());
        write_text(&p, "unit_id,value\na,1x\nb,3\n").unwrap();
        assert!(read_values(&p, &ids).is_err());
        write_text(&p, "unit_id,value\na,1,7\nb,3\n").unwrap();
        assert!(read_values(&p, &ids).is_err());
        write_text(&p, "id,value\na,1\nb,3\n").unwrap();
        assert!(read_values(&p, &ids).is_err());
    }

    #[test]
    fn json_trailing_garbage_rejected() {
        let p = Path::new("x.json");
        assert!(parse_json::<serde_json::Value>("{\"a\": 1} {", p).is_err());
        assert!(parse_json::<serde_json::Value>("{\"a\": 1}\n", p).is_ok());
    }
}

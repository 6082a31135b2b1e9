//! RMSE, WAIC and Gelman-Rubin diagnostics, and the metric report that
//! collects them.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Root mean square error over pairs where both entries are finite.
pub fn rmse(truth: &[f64], pred: &[f64]) -> Result<f64> {
    if truth.len() != pred.len() {
        return Err(invalid(format!("rmse inputs differ in length ({} vs {})", truth.len(), pred.len())));
    }
    let (mut ss, mut n) = (0.0, 0usize);
    for (t, p) in truth.iter().zip(pred) {
        if t.is_finite() && p.is_finite() {
            ss += (t - p).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        return Err(invalid("rmse needs at least one non-missing pair"));
    }
    Ok((ss / n as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waic {
    pub waic: f64,
    pub lppd: f64,
    pub p_waic: f64,
}

/// WAIC with the variance penalty, from a draws x observations matrix of
/// pointwise log-likelihoods.
pub fn waic(ll: &DMatrix<f64>) -> Result<Waic> {
    waic_columns(ll, &(0..ll.ncols()).collect::<Vec<_>>())
}

/// WAIC restricted to a subset of observation columns.
pub fn waic_columns(ll: &DMatrix<f64>, cols: &[usize]) -> Result<Waic> {
    let s = ll.nrows();
    if s < 2 {
        return Err(invalid(format!("WAIC needs at least 2 draws, got {s}")));
    }
    if cols.is_empty() {
        return Err(invalid("WAIC needs at least one observation"));
    }
    let (mut lppd, mut p_waic) = (0.0, 0.0);
    for &j in cols {
        let col = ll.column(j);
        let max = col.max();
        let lme = max + (col.iter().map(|v| (v - max).exp()).sum::<f64>() / s as f64).ln();
        let mean = col.mean();
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (s - 1) as f64;
        lppd += lme;
        p_waic += var;
    }
    Ok(Waic { waic: -2.0 * (lppd - p_waic), lppd, p_waic })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GelmanRubin {
    pub rhat: f64,
    /// Set when some chain has zero variance; `rhat` is then infinite.
    pub degenerate: bool,
}

/// Classic potential scale reduction factor, floored at 1.
pub fn gelman_rubin(chains: &[&[f64]]) -> Result<GelmanRubin> {
    let m = chains.len();
    if m < 2 {
        return Err(invalid("Gelman-Rubin needs at least 2 chains"));
    }
    let n = chains[0].len();
    if n < 10 || chains.iter().any(|c| c.len() != n) {
        return Err(invalid("Gelman-Rubin needs chains of equal length >= 10"));
    }
    let nf = n as f64;
    let means: Vec<f64> = chains.iter().map(|c| c.iter().sum::<f64>() / nf).collect();
    let vars: Vec<f64> = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (nf - 1.0))
        .collect();
    if vars.contains(&0.0) {
        return Ok(GelmanRubin { rhat: f64::INFINITY, degenerate: true });
    }
    let w = vars.iter().sum::<f64>() / m as f64;
    let grand = means.iter().sum::<f64>() / m as f64;
    let b = nf * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>() / (m as f64 - 1.0);
    let v = (nf - 1.0) / nf * w + b / nf;
    Ok(GelmanRubin { rhat: (v / w).sqrt().max(1.0), degenerate: false })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmseEntry {
    /// `y1` or `y2`.
    pub variable: String,
    /// Scale label, e.g. `partition`, `d1`, `d2`.
    pub scale: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaicEntry {
    /// `y1`, `y2` or `combined`.
    pub scope: String,
    pub waic: f64,
    pub lppd: f64,
    pub p_waic: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RhatEntry {
    pub param: String,
    /// `None` encodes an infinite value in JSON.
    pub rhat: Option<f64>,
    pub degenerate: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rmse: Vec<RmseEntry>,
    pub waic: Vec<WaicEntry>,
    pub gelman_rubin: Vec<RhatEntry>,
    pub config: serde_json::Value,
}

impl MetricReport {
    pub fn push_rhat(&mut self, param: &str, gr: GelmanRubin) {
        self.gelman_rubin.push(RhatEntry {
            param: param.to_string(),
            rhat: gr.rhat.is_finite().then_some(gr.rhat),
            degenerate: gr.degenerate,
        });
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// One header row and one value row. Floats use Rust's shortest
    /// round-trip formatting.
    pub fn to_csv(&self) -> Result<String> {
        let mut cols: Vec<(String, String)> = Vec::new();
        for e in &self.rmse {
            cols.push((format!("rmse.{}.{}", e.variable, e.scale), e.value.to_string()));
        }
        for e in &self.waic {
            cols.push((format!("waic.{}.waic", e.scope), e.waic.to_string()));
            cols.push((format!("waic.{}.lppd", e.scope), e.lppd.to_string()));
            cols.push((format!("waic.{}.p_waic", e.scope), e.p_waic.to_string()));
        }
        for e in &self.gelman_rubin {
            let v = e.rhat.map_or_else(|| "inf".to_string(), |r| r.to_string());
            cols.push((format!("rhat.{}", e.param), v));
            cols.push((format!("rhat_degenerate.{}", e.param), e.degenerate.to_string()));
        }
        cols.push(("config".into(), serde_json::to_string(&self.config)?));
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(cols.iter().map(|c| c.0.as_str()))?;
        w.write_record(cols.iter().map(|c| c.1.as_str()))?;
        let bytes = w.into_inner().map_err(|e| Error::Numerical(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(s: &str) -> Result<Self> {
        let parse_err = |m: String| Error::Parse { context: "metric CSV".into(), message: m };
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(s.as_bytes());
        let header = r.headers()?.clone();
        let mut records = r.records();
        let row = records.next().ok_or_else(|| parse_err("missing value row".into()))??;
        if records.next().is_some() {
            return Err(parse_err("expected exactly one value row".into()));
        }
        let num = |v: &str| v.parse::<f64>().map_err(|e| parse_err(format!("`{v}`: {e}")));
        let mut report = MetricReport::default();
        let mut waic: BTreeMap<String, (Option<f64>, Option<f64>, Option<f64>)> = BTreeMap::new();
        let mut waic_order: Vec<String> = Vec::new();
        for (key, value) in header.iter().zip(row.iter()) {
            let parts: Vec<&str> = key.splitn(3, '.').collect();
            match parts.as_slice() {
                ["rmse", var, scale] => report.rmse.push(RmseEntry {
                    variable: var.to_string(),
                    scale: scale.to_string(),
                    value: num(value)?,
                }),
                ["waic", scope, field] => {
                    if !waic.contains_key(*scope) {
                        waic_order.push(scope.to_string());
                    }
                    let e = waic.entry(scope.to_string()).or_default();
                    let v = Some(num(value)?);
                    match *field {
                        "waic" => e.0 = v,
                        "lppd" => e.1 = v,
                        "p_waic" => e.2 = v,
                        other => return Err(parse_err(format!("unknown WAIC field `{other}`"))),
                    }
                }
                ["rhat", param] => report.gelman_rubin.push(RhatEntry {
                    param: param.to_string(),
                    rhat: if value == "inf" { None } else { Some(num(value)?) },
                    degenerate: false,
                }),
                ["rhat_degenerate", param] => {
                    let e = report
                        .gelman_rubin
                        .iter_mut()
                        .find(|e| e.param == *param)
                        .ok_or_else(|| parse_err(format!("degenerate flag without rhat for `{param}`")))?;
                    e.degenerate = value.parse().map_err(|_| parse_err(format!("bad flag `{value}`")))?;
                }
                ["config"] => report.config = serde_json::from_str(value)?,
                _ => return Err(parse_err(format!("unknown column `{key}`"))),
            }
        }
        for scope in waic_order {
            let (w, l, p) = waic[&scope];
            match (w, l, p) {
                (Some(waic), Some(lppd), Some(p_waic)) => report.waic.push(WaicEntry { scope, waic, lppd, p_waic }),
                _ => return Err(parse_err(format!("incomplete WAIC columns for `{scope}`"))),
            }
        }
        Ok(report)
    }
}

//! `report.csv` (one row per chain position) and `summary.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde_json::{json, Map, Value};

use super::SpecOutcome;

pub const REPORT_HEADER: &str = "method,seed,chain_id,position,success,steps_used,task";

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub method: String,
    pub seed: u64,
    pub chain_id: usize,
    /// 1-based.
    pub position: usize,
    pub success: bool,
    pub steps_used: usize,
    pub task: String,
}

impl EvalRow {
    pub fn from_outcomes(method: &str, seed: u64, outcomes: &[SpecOutcome]) -> Vec<EvalRow> {
        outcomes
            .iter()
            .flat_map(|o| {
                (0..o.success.len()).map(move |i| EvalRow {
                    method: method.into(),
                    seed,
                    chain_id: o.chain_id,
                    position: i + 1,
                    success: o.success[i],
                    steps_used: o.steps_used[i],
                    task: o.tasks[i].clone(),
                })
            })
            .collect()
    }

    fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.method,
            self.seed,
            self.chain_id,
            self.position,
            u8::from(self.success),
            self.steps_used,
            // task names may carry a comma (placement zones)
            self.task.replace(',', ";")
        )
    }

    fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return None;
        }
        Some(Self {
            method: f[0].into(),
            seed: f[1].parse().ok()?,
            chain_id: f[2].parse().ok()?,
            position: f[3].parse().ok()?,
            success: match f[4] {
                "1" => true,
                "0" => false,
                _ => return None,
            },
            steps_used: f[5].parse().ok()?,
            task: f[6].replace(';', ","),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub method: String,
    pub protocol: String,
    /// Chains per seed.
    pub n_chains: usize,
    pub seeds: Vec<u64>,
    /// `sr[i]`: fraction of chains that solve at least `i + 1` sub-goals in a
    /// row, averaged over seeds.
    pub sr: Vec<f64>,
    pub avg_len_mean: f64,
    /// Sample standard deviation over seeds; 0 for a single seed.
    pub avg_len_std: f64,
    /// Success rate of every task kind over all positions and seeds.
    pub per_task: BTreeMap<String, f64>,
}

impl EvalSummary {
    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        m.insert("method".into(), json!(self.method));
        m.insert("protocol".into(), json!(self.protocol));
        m.insert("n_chains".into(), json!(self.n_chains));
        m.insert("seeds".into(), json!(self.seeds));
        for (i, v) in self.sr.iter().enumerate() {
            m.insert(format!("sr_{}", i + 1), json!(v));
        }
        m.insert("avg_len_mean".into(), json!(self.avg_len_mean));
        m.insert("avg_len_std".into(), json!(self.avg_len_std));
        m.insert("per_task".into(), json!(self.per_task));
        Value::Object(m)
    }

    pub fn from_json(v: &Value) -> Result<Self, String> {
        let o = v.as_object().ok_or("summary is not an object")?;
        let get = |k: &str| o.get(k).ok_or_else(|| format!("summary lacks '{k}'"));
        let num = |k: &str| get(k)?.as_f64().ok_or_else(|| format!("'{k}' is not a number"));
        let mut sr = Vec::new();
        while let Some(x) = o.get(&format!("sr_{}", sr.len() + 1)) {
            sr.push(x.as_f64().ok_or("sr value is not a number")?);
        }
        Ok(Self {
            method: get("method")?.as_str().ok_or("method is not a string")?.into(),
            protocol: get("protocol")?.as_str().ok_or("protocol is not a string")?.into(),
            n_chains: get("n_chains")?.as_u64().ok_or("n_chains is not an integer")? as usize,
            seeds: serde_json::from_value(get("seeds")?.clone()).map_err(|e| e.to_string())?,
            sr,
            avg_len_mean: num("avg_len_mean")?,
            avg_len_std: num("avg_len_std")?,
            per_task: serde_json::from_value(get("per_task")?.clone()).map_err(|e| e.to_string())?,
        })
    }
}

/// Recompute the summary from raw rows.
pub fn summarize(method: &str, protocol: &str, rows: &[EvalRow]) -> EvalSummary {
    let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let positions = rows.iter().map(|r| r.position).max().unwrap_or(0);
    let mut sr = vec![0.0; positions];
    let mut lens = Vec::with_capacity(seeds.len());
    let mut n_chains = 0;
    for &seed in &seeds {
        // chain id -> success flags by position
        let mut chains: BTreeMap<usize, Vec<bool>> = BTreeMap::new();
        for r in rows.iter().filter(|r| r.seed == seed) {
            let flags = chains.entry(r.chain_id).or_insert_with(|| vec![false; positions]);
            flags[r.position - 1] = r.success;
        }
        n_chains = chains.len();
        let prefix: Vec<usize> = chains.values().map(|f| f.iter().take_while(|&&s| s).count()).collect();
        let n = prefix.len().max(1) as f64;
        for (i, s) in sr.iter_mut().enumerate() {
            *s += prefix.iter().filter(|&&p| p > i).count() as f64 / n / seeds.len() as f64;
        }
        lens.push(prefix.iter().sum::<usize>() as f64 / n);
    }
    let k = lens.len() as f64;
    let mean = if lens.is_empty() { 0.0 } else { lens.iter().sum::<f64>() / k };
    let std =
        if lens.len() < 2 { 0.0 } else { (lens.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt() };
    let mut tally: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for r in rows {
        // placement zones differ per chain; tally them as one task
        let kind = r.task.split('@').next().unwrap_or_default().to_string();
        let e = tally.entry(kind).or_default();
        e.0 += usize::from(r.success);
        e.1 += 1;
    }
    EvalSummary {
        method: method.into(),
        protocol: protocol.into(),
        n_chains,
        seeds,
        sr,
        avg_len_mean: mean,
        avg_len_std: std,
        per_task: tally.into_iter().map(|(t, (s, n))| (t, s as f64 / n as f64)).collect(),
    }
}

/// Write `report.csv` and `summary.json` under `dir`.
pub fn emit_report(dir: &Path, method: &str, protocol: &str, rows: &[EvalRow]) -> std::io::Result<EvalSummary> {
    fs::create_dir_all(dir)?;
    let mut text = String::from(REPORT_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.to_line());
        text.push('\n');
    }
    fs::write(dir.join("report.csv"), text)?;
    let summary = summarize(method, protocol, rows);
    let json = serde_json::to_string_pretty(&summary.to_json()).map_err(std::io::Error::other)?;
    fs::write(dir.join("summary.json"), json + "\n")?;
    Ok(summary)
}

pub fn load_report(dir: &Path) -> Result<(Vec<EvalRow>, EvalSummary), String> {
    let csv = dir.join("report.csv");
    let text = fs::read_to_string(&csv).map_err(|e| format!("{}: {e}", csv.display()))?;
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_HEADER) {
        return Err(format!("{}: unexpected header", csv.display()));
    }
    let rows = lines
        .map(|l| EvalRow::parse(l).ok_or_else(|| format!("{}: bad row '{l}'", csv.display())))
        .collect::<Result<Vec<_>, _>>()?;
    let js = dir.join("summary.json");
    let text = fs::read_to_string(&js).map_err(|e| format!("{}: {e}", js.display()))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", js.display()))?;
    Ok((rows, EvalSummary::from_json(&v)?))
}

//! Result records and tables. Every table cell is traceable to per-fact
//! JSON-lines records, and serialization is byte-deterministic.

use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::CandidateSet;
use crate::error::Result;

/// Per-fact provenance record: one edit, its attacks, and its damage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactRecord {
    pub seed: u64,
    pub scale: String,
    pub target: String,
    pub defense: String,
    pub fact_id: usize,
    pub answer: u32,
    pub p_pre: f64,
    pub p_post: f64,
    pub rewrite: f64,
    pub steps: usize,
    pub converged: bool,
    /// attack label -> answer recovered
    pub attack_hits: BTreeMap<String, bool>,
    /// control kind label -> (pre accuracy, post accuracy, item count)
    pub damage: BTreeMap<String, (f64, f64, usize)>,
    /// Head-projection defenses only: the deleted answer sits outside the
    /// lens top-k at every defended layer after the edit.
    pub hp_postcondition: Option<bool>,
    /// Max-entropy defenses only: mean lens entropy over L before and after.
    pub lens_entropy: Option<(f64, f64)>,
}

/// One row per (defense, edit target, model scale, seed).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableRow {
    pub defense: String,
    pub target: String,
    pub scale: String,
    pub seed: u64,
    pub facts: usize,
    pub edit_failure_rate: f64,
    pub rewrite_mean: f64,
    /// attack label -> success rate over converged edits
    pub attack_success: BTreeMap<String, f64>,
    /// control kind label -> (per-fact mean delta, pooled delta)
    pub dacc: BTreeMap<String, (f64, f64)>,
    /// mean attack success + lambda * random delta-accuracy, when a lambda
    /// report weight is configured
    pub combined_score: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<TableRow>,
}

/// Fixed numeric formatting so equal results serialize to equal bytes.
fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

impl ResultsTable {
    /// Deterministic ordering: (scale, target, defense, seed).
    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| {
            (&a.scale, &a.target, &a.defense, a.seed).cmp(&(
                &b.scale,
                &b.target,
                &b.defense,
                b.seed,
            ))
        });
    }

    fn attack_labels(&self) -> Vec<String> {
        let mut labels: Vec<String> = self
            .rows
            .iter()
            .flat_map(|r| r.attack_success.keys().cloned())
            .collect();
        labels.sort();
        labels.dedup();
        labels
    }

    fn dacc_labels(&self) -> Vec<String> {
        let mut labels: Vec<String> = self
            .rows
            .iter()
            .flat_map(|r| r.dacc.keys().cloned())
            .collect();
        labels.sort();
        labels.dedup();
        labels
    }

    pub fn to_csv(&self) -> String {
        let attacks = self.attack_labels();
        let daccs = self.dacc_labels();
        let mut out = String::new();
        out.push_str("scale,target,defense,seed,facts,edit_failure_rate,rewrite_score");
        for a in &attacks {
            out.push_str(&format!(",{a}"));
        }
        for d in &daccs {
            out.push_str(&format!(",{d}_dacc,{d}_dacc_pooled"));
        }
        out.push_str(",combined_score\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}",
                row.scale,
                row.target,
                row.defense,
                row.seed,
                row.facts,
                fmt(row.edit_failure_rate),
                fmt(row.rewrite_mean)
            ));
            for a in &attacks {
                match row.attack_success.get(a) {
                    Some(v) => out.push_str(&format!(",{}", fmt(*v))),
                    None => out.push(','),
                }
            }
            for d in &daccs {
                match row.dacc.get(d) {
                    Some((per_fact, pooled)) => {
                        out.push_str(&format!(",{},{}", fmt(*per_fact), fmt(*pooled)))
                    }
                    None => out.push_str(",,"),
                }
            }
            match row.combined_score {
                Some(v) => out.push_str(&format!(",{}\n", fmt(v))),
                None => out.push_str(",\n"),
            }
        }
        out
    }

    /// Mean and sample standard deviation across seeds, one row per
    /// (scale, target, defense).
    pub fn aggregate_csv(&self) -> String {
        let attacks = self.attack_labels();
        let daccs = self.dacc_labels();
        let mut groups: BTreeMap<(String, String, String), Vec<&TableRow>> = BTreeMap::new();
        for row in &self.rows {
            groups
                .entry((row.scale.clone(), row.target.clone(), row.defense.clone()))
                .or_default()
                .push(row);
        }
        let stat = |values: &[f64]| -> (f64, f64) {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = if values.len() > 1 {
                values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            (mean, var.sqrt())
        };
        let mut out = String::new();
        out.push_str("scale,target,defense,seeds,rewrite_mean,rewrite_std");
        for a in &attacks {
            out.push_str(&format!(",{a}_mean,{a}_std"));
        }
        for d in &daccs {
            out.push_str(&format!(",{d}_dacc_mean,{d}_dacc_std"));
        }
        out.push('\n');
        for ((scale, target, defense), rows) in groups {
            out.push_str(&format!("{scale},{target},{defense},{}", rows.len()));
            let rewrites: Vec<f64> = rows.iter().map(|r| r.rewrite_mean).collect();
            let (m, s) = stat(&rewrites);
            out.push_str(&format!(",{},{}", fmt(m), fmt(s)));
            for a in &attacks {
                let vals: Vec<f64> = rows
                    .iter()
                    .filter_map(|r| r.attack_success.get(a).copied())
                    .collect();
                if vals.is_empty() {
                    out.push_str(",,");
                } else {
                    let (m, s) = stat(&vals);
                    out.push_str(&format!(",{},{}", fmt(m), fmt(s)));
                }
            }
            for d in &daccs {
                let vals: Vec<f64> = rows
                    .iter()
                    .filter_map(|r| r.dacc.get(d).map(|(pf, _)| *pf))
                    .collect();
                if vals.is_empty() {
                    out.push_str(",,");
                } else {
                    let (m, s) = stat(&vals);
                    out.push_str(&format!(",{},{}", fmt(m), fmt(s)));
                }
            }
            out.push('\n');
        }
        out
    }
}

pub fn save_records(records: &[FactRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for record in records {
        serde_json::to_writer(&mut w, record)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_records(path: &Path) -> Result<Vec<FactRecord>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut records = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(records)
}

/// Rebuild table rows from per-fact records (attack success as the mean of
/// per-fact hits, which equals the candidate-set membership rate).
pub fn rows_from_records(records: &[FactRecord]) -> ResultsTable {
    let mut groups: BTreeMap<(String, String, String, u64), Vec<&FactRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.scale.clone(), r.target.clone(), r.defense.clone(), r.seed))
            .or_default()
            .push(r);
    }
    let mut table = ResultsTable::default();
    for ((scale, target, defense, seed), rows) in groups {
        let total = rows.len();
        let converged: Vec<&&FactRecord> = rows.iter().filter(|r| r.converged).collect();
        let mut attack_success = BTreeMap::new();
        let labels: Vec<String> = converged
            .iter()
            .flat_map(|r| r.attack_hits.keys().cloned())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        for label in labels {
            let hits: Vec<bool> = converged
                .iter()
                .filter_map(|r| r.attack_hits.get(&label).copied())
                .collect();
            if !hits.is_empty() {
                let rate = hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64;
                attack_success.insert(label, rate);
            }
        }
        let mut dacc = BTreeMap::new();
        let dlabels: Vec<String> = converged
            .iter()
            .flat_map(|r| r.damage.keys().cloned())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        for label in dlabels {
            let mut per_fact = 0.0;
            let mut missed = 0.0;
            let mut items = 0.0;
            let mut n = 0usize;
            for r in &converged {
                if let Some(&(pre, post, count)) = r.damage.get(&label) {
                    per_fact += pre - post;
                    missed += (pre - post) * count as f64;
                    items += count as f64;
                    n += 1;
                }
            }
            if n > 0 {
                dacc.insert(
                    label,
                    (per_fact / n as f64, if items > 0.0 { missed / items } else { 0.0 }),
                );
            }
        }
        let rewrite_mean = if converged.is_empty() {
            0.0
        } else {
            converged.iter().map(|r| r.rewrite).sum::<f64>() / converged.len() as f64
        };
        table.rows.push(TableRow {
            defense,
            target,
            scale,
            seed,
            facts: total,
            edit_failure_rate: 1.0 - converged.len() as f64 / total as f64,
            rewrite_mean,
            attack_success,
            dacc,
            combined_score: None,
        });
    }
    table.sort();
    table
}

pub fn save_candidates(candidates: &[CandidateSet], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for set in candidates {
        serde_json::to_writer(&mut w, set)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(defense: &str, seed: u64, hp: f64) -> TableRow {
        let mut attack_success = BTreeMap::new();
        attack_success.insert("hp".to_string(), hp);
        let mut dacc = BTreeMap::new();
        dacc.insert("random".to_string(), (0.01, 0.012));
        TableRow {
            defense: defense.into(),
            target: "llm_mlp_l2".into(),
            scale: "base".into(),
            seed,
            facts: 10,
            edit_failure_rate: 0.0,
            rewrite_mean: 0.95,
            attack_success,
            dacc,
            combined_score: None,
        }
    }

    #[test]
    fn csv_bytes_are_deterministic() {
        let mut t1 = ResultsTable {
            rows: vec![row("b", 2, 0.4), row("a", 1, 0.3)],
        };
        let mut t2 = ResultsTable {
            rows: vec![row("a", 1, 0.3), row("b", 2, 0.4)],
        };
        t1.sort();
        t2.sort();
        assert_eq!(t1.to_csv(), t2.to_csv());
        assert!(t1.to_csv().starts_with("scale,target,defense,seed"));
    }

    #[test]
    fn aggregate_reports_mean_and_std() {
        let mut t = ResultsTable {
            rows: vec![row("a", 1, 0.2), row("a", 2, 0.4)],
        };
        t.sort();
        let agg = t.aggregate_csv();
        assert!(agg.contains("hp_mean"));
        assert!(agg.contains("0.300000"), "agg: {agg}");
    }

    #[test]
    fn records_roundtrip() {
        let rec = FactRecord {
            seed: 1,
            scale: "base".into(),
            target: "llm_mlp_l2".into(),
            defense: "fact_erasure".into(),
            fact_id: 7,
            answer: 99,
            p_pre: 0.97,
            p_post: 0.02,
            rewrite: 0.979,
            steps: 55,
            converged: true,
            attack_hits: BTreeMap::new(),
            damage: BTreeMap::new(),
            hp_postcondition: None,
            lens_entropy: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.jsonl");
        save_records(&[rec.clone()], &path).unwrap();
        let loaded = load_records(&path).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].fact_id, rec.fact_id);
        assert_eq!(loaded[0].rewrite, rec.rewrite);
    }
}

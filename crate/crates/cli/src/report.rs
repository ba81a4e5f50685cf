//! Merging sweep CSVs from several run directories into one side-by-side
//! comparison table (sparsity levels as rows, dynamics as column groups).

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};

const EXPECTED_HEADER: &str = "dynamic,mode,target,epsilon,sparsity,baseline_acc,pruned_acc,drop";

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub dynamic: String,
    pub mode: String,
    pub target: f64,
    pub epsilon: f64,
    pub sparsity: f64,
    pub baseline_acc: f64,
    pub pruned_acc: f64,
    pub drop: f64,
}

/// Parses one sweep CSV produced by the `sweep`/`threshold-sweep`
/// commands, validating its header.
pub fn parse_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading sweep csv {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default().trim();
    if header != EXPECTED_HEADER {
        bail!(
            "{}: unexpected header '{header}' (expected '{EXPECTED_HEADER}')",
            path.display()
        );
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            bail!("{}: line {} has {} fields", path.display(), lineno + 2, fields.len());
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .with_context(|| format!("{}: line {} field {}", path.display(), lineno + 2, i))
        };
        rows.push(SweepRow {
            dynamic: fields[0].to_string(),
            mode: fields[1].to_string(),
            target: num(2)?,
            epsilon: num(3)?,
            sparsity: num(4)?,
            baseline_acc: num(5)?,
            pruned_acc: num(6)?,
            drop: num(7)?,
        });
    }
    Ok(rows)
}

/// Merged table: one row per target, one column group per dynamic.
pub struct MergedTable {
    pub dynamics: Vec<String>,
    /// target -> dynamic -> row
    pub rows: BTreeMap<String, BTreeMap<String, SweepRow>>,
}

fn target_key(t: f64) -> String {
    format!("{t:.6}")
}

pub fn merge(rows: Vec<SweepRow>) -> Result<MergedTable> {
    let mut dynamics: Vec<String> = Vec::new();
    let mut table: BTreeMap<String, BTreeMap<String, SweepRow>> = BTreeMap::new();
    for row in rows {
        if !dynamics.contains(&row.dynamic) {
            dynamics.push(row.dynamic.clone());
        }
        let prev = table
            .entry(target_key(row.target))
            .or_default()
            .insert(row.dynamic.clone(), row);
        if prev.is_some() {
            bail!("duplicate (dynamic, target) combination in inputs");
        }
    }
    Ok(MergedTable {
        dynamics,
        rows: table,
    })
}

impl MergedTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("target");
        for d in &self.dynamics {
            out.push_str(&format!(",{d}_epsilon,{d}_sparsity,{d}_acc,{d}_drop"));
        }
        out.push('\n');
        for cells in self.rows.values() {
            let target = cells.values().next().map(|r| r.target).unwrap_or(f64::NAN);
            out.push_str(&format!("{target}"));
            for d in &self.dynamics {
                match cells.get(d) {
                    Some(r) => out.push_str(&format!(
                        ",{},{},{},{}",
                        r.epsilon, r.sparsity, r.pruned_acc, r.drop
                    )),
                    None => out.push_str(",,,,"),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| target |");
        for d in &self.dynamics {
            out.push_str(&format!(" {d} eps | {d} acc (drop) |"));
        }
        out.push('\n');
        out.push_str("|---|");
        for _ in &self.dynamics {
            out.push_str("---|---|");
        }
        out.push('\n');
        for cells in self.rows.values() {
            let target = cells.values().next().map(|r| r.target).unwrap_or(f64::NAN);
            out.push_str(&format!("| {target} |"));
            for d in &self.dynamics {
                match cells.get(d) {
                    Some(r) => out.push_str(&format!(
                        " {:.4} | {:.4} ({:.4}) |",
                        r.epsilon, r.pruned_acc, r.drop
                    )),
                    None => out.push_str(" - | - |"),
                }
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merges_two_dynamics() {
        let rows = vec![
            SweepRow {
                dynamic: "replicator".into(),
                mode: "quantile".into(),
                target: 0.35,
                epsilon: 0.63,
                sparsity: 0.3503,
                baseline_acc: 0.98,
                pruned_acc: 0.95,
                drop: 0.03,
            },
            SweepRow {
                dynamic: "mutation".into(),
                mode: "quantile".into(),
                target: 0.35,
                epsilon: 0.64,
                sparsity: 0.3503,
                baseline_acc: 0.98,
                pruned_acc: 0.94,
                drop: 0.04,
            },
        ];
        let merged = merge(rows).unwrap();
        assert_eq!(merged.dynamics, vec!["replicator", "mutation"]);
        assert_eq!(merged.rows.len(), 1);
        let csv = merged.to_csv();
        assert!(csv.starts_with("target,replicator_epsilon"));
        assert!(csv.contains("mutation_epsilon") || csv.contains(",0.64,"));
        let md = merged.to_markdown();
        assert!(md.contains("replicator eps"));
    }

    #[test]
    fn duplicate_rows_are_rejected() {
        let row = SweepRow {
            dynamic: "replicator".into(),
            mode: "quantile".into(),
            target: 0.5,
            epsilon: 0.6,
            sparsity: 0.5,
            baseline_acc: 0.98,
            pruned_acc: 0.9,
            drop: 0.08,
        };
        assert!(merge(vec![row.clone(), row]).is_err());
    }

    #[test]
    fn header_is_validated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        std::fs::write(&path, "wrong,header\n1,2\n").unwrap();
        assert!(parse_sweep_csv(&path).is_err());
    }

    #[test]
    fn round_trips_written_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        std::fs::write(
            &path,
            format!("{EXPECTED_HEADER}\nreplicator,quantile,0.35,0.63,0.3503,0.98,0.95,0.03\n"),
        )
        .unwrap();
        let rows = parse_sweep_csv(&path).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].dynamic, "replicator");
        assert_eq!(rows[0].target, 0.35);
    }
}

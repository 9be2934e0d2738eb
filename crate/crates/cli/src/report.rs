use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;
use tsfm_core::backbones::Arch;
use tsfm_core::finetune_eval::{
    accuracy_matrix, average_rank, line_plot, read_convergence, read_results, smoothness, Accuracy, RunResult,
};
use tsfm_core::pretrain::Method;
use tsfm_core::{Error, Result};

use crate::commands::{create_dir, write_json};
use crate::ReportArgs;

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Io {
        context: format!("reading {}", dir.display()),
        source: e,
    })?;
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for p in paths {
        if p.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::InvalidArgument(format!("{}: {e}", path.display()))
}

/// Merges rows from every file; a repeated (task, method) must agree.
fn collect_results(files: &[PathBuf]) -> Result<Vec<RunResult>> {
    let mut by_key: BTreeMap<(String, String), RunResult> = BTreeMap::new();
    for f in files.iter().filter(|f| f.file_name().is_some_and(|n| n == "results.csv")) {
        for r in read_results(f)? {
            let key = (r.task.clone(), r.method.clone());
            if let Some(prev) = by_key.get(&key) {
                if prev.accuracy() != r.accuracy() {
                    return Err(Error::InvalidArgument(format!(
                        "conflicting results for ({}, {}) in {}",
                        r.method,
                        r.task,
                        f.display()
                    )));
                }
                continue;
            }
            by_key.insert(key, r);
        }
    }
    Ok(by_key.into_values().collect())
}

/// Grid columns: the two baselines, then the backbones.
fn grid_columns() -> Vec<String> {
    let mut cols = vec!["ed".to_string(), "dtw".to_string()];
    cols.extend(Arch::ALL.iter().map(|a| a.name().to_string()));
    cols
}

fn grid_rows() -> Vec<String> {
    let mut rows = vec!["none".to_string()];
    rows.extend(Method::ALL.iter().map(|m| m.name().to_string()));
    rows
}

fn ties(a: Accuracy, b: Accuracy, tol: f64) -> Ordering {
    if tol == 0.0 {
        a.cmp(&b)
    } else if (a.value() - b.value()).abs() <= tol {
        Ordering::Equal
    } else {
        a.value().total_cmp(&b.value())
    }
}

pub fn run(a: &ReportArgs) -> Result<()> {
    if !(a.tie_tolerance >= 0.0) {
        return Err(Error::InvalidArgument("--tie-tolerance must be non-negative".into()));
    }
    let mut files = Vec::new();
    walk(&a.results, &mut files)?;
    let results = collect_results(&files)?;
    if results.is_empty() {
        return Err(Error::InvalidArgument(format!("no results.csv rows under {}", a.results.display())));
    }
    let (methods, tasks, acc) = accuracy_matrix(&results);
    let table = average_rank(&methods, &tasks, &acc)?;
    create_dir(&a.out)?;

    let path = a.out.join("rank_table.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record(["method", "mean_rank"]).map_err(|e| csv_err(&path, e))?;
    for (m, r) in table.methods.iter().zip(&table.mean_ranks) {
        w.write_record([m.as_str(), &format!("{r:.4}")]).map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::Io {
        context: format!("writing {}", path.display()),
        source: e,
    })?;

    let path = a.out.join("ranks_per_task.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    let mut header = vec!["method".to_string()];
    header.extend(tasks.iter().cloned());
    w.write_record(&header).map_err(|e| csv_err(&path, e))?;
    for (m, ranks) in table.methods.iter().zip(&table.ranks) {
        let mut rec = vec![m.clone()];
        rec.extend(ranks.iter().map(|r| format!("{r}")));
        w.write_record(&rec).map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::Io {
        context: format!("writing {}", path.display()),
        source: e,
    })?;

    let cols = grid_columns();
    let path = a.out.join("rank_grid.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    let mut header = vec!["average_rank".to_string()];
    header.extend(cols.iter().cloned());
    w.write_record(&header).map_err(|e| csv_err(&path, e))?;
    for row in grid_rows() {
        let mut rec = vec![row.clone()];
        for col in &cols {
            let id = format!("{row}+{col}");
            let cell = match table.methods.iter().position(|m| *m == id) {
                Some(i) => format!("{:.2}", table.mean_ranks[i]),
                None => "-".to_string(),
            };
            rec.push(cell);
        }
        w.write_record(&rec).map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::Io {
        context: format!("writing {}", path.display()),
        source: e,
    })?;

    println!("{:<24} mean rank", "method");
    for (m, r) in table.methods.iter().zip(&table.mean_ranks) {
        println!("{m:<24} {r:.4}");
    }

    let designated: Vec<usize> = methods
        .iter()
        .enumerate()
        .filter(|(_, m)| **m == a.designated || m.split('+').next() == Some(a.designated.as_str()))
        .map(|(i, _)| i)
        .collect();
    let mut summary = Vec::new();
    for &d in &designated {
        let (mut win, mut tie, mut loss) = (0, 0, 0);
        for t in 0..tasks.len() {
            let mine = acc[d][t].expect("complete matrix");
            let best_other = (0..methods.len())
                .filter(|&m| m != d)
                .filter_map(|m| acc[m][t])
                .max();
            match best_other.map(|b| ties(mine, b, a.tie_tolerance)) {
                Some(Ordering::Greater) | None => win += 1,
                Some(Ordering::Equal) => tie += 1,
                Some(Ordering::Less) => loss += 1,
            }
        }
        let pct = 100.0 * (win + tie) as f64 / tasks.len() as f64;
        println!(
            "{} vs best other: {win} win, {tie} tie, {loss} loss; win-or-tie {pct:.1}% of {} tasks (tie tolerance {})",
            methods[d],
            tasks.len(),
            a.tie_tolerance
        );
        summary.push(json!({
            "method": methods[d],
            "wins": win,
            "ties": tie,
            "losses": loss,
            "tasks": tasks.len(),
            "win_or_tie_percent": pct,
        }));
    }
    if designated.is_empty() {
        println!("designated method `{}` has no results", a.designated);
    }
    write_json(
        &a.out.join("win_tie_loss.json"),
        &json!({ "designated": a.designated, "tie_tolerance": a.tie_tolerance, "comparisons": summary }),
    )?;

    plot_convergence(&files, &a.out)
}

/// One SVG per (method, task) with the pre-trained and random validation
/// curves, plus a smoothness table.
fn plot_convergence(files: &[PathBuf], out: &Path) -> Result<()> {
    let mut groups: BTreeMap<String, Vec<(String, Vec<f64>)>> = BTreeMap::new();
    for f in files {
        let in_conv = f.parent().and_then(|p| p.file_name()).is_some_and(|n| n == "convergence");
        if !in_conv || f.extension().is_none_or(|e| e != "csv") {
            continue;
        }
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let Some((group, _)) = stem.rsplit_once("__") else {
            continue;
        };
        let (records, init) = read_convergence(f)?;
        let name = init.map_or_else(|| "unknown".to_string(), |i| i.to_string());
        groups
            .entry(group.to_string())
            .or_default()
            .push((name, records.iter().map(|r| r.val_acc).collect()));
    }
    if groups.is_empty() {
        return Ok(());
    }
    let dir = out.join("plots");
    create_dir(&dir)?;
    let path = out.join("smoothness.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record(["group", "init", "smoothness"]).map_err(|e| csv_err(&path, e))?;
    for (group, series) in &groups {
        for (init, curve) in series {
            w.write_record([group.as_str(), init, &format!("{:.6}", smoothness(curve))])
                .map_err(|e| csv_err(&path, e))?;
        }
        let svg = line_plot(series, &group.replace("__", " on "));
        let p = dir.join(format!("{group}.svg"));
        fs::write(&p, svg).map_err(|e| Error::Io {
            context: format!("writing {}", p.display()),
            source: e,
        })?;
    }
    w.flush().map_err(|e| Error::Io {
        context: format!("writing {}", path.display()),
        source: e,
    })
}

//! Reads a finished run directory back: plot inputs and a text summary.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::experiments::plot::PlotData;
use crate::leakage::AmplificationRow;
use crate::selective::ProjectionReport;

fn read_rows(path: &Path) -> Result<Option<Vec<Vec<String>>>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(Some(text.lines().skip(1).filter(|l| !l.is_empty()).map(|l| l.split(',').map(String::from).collect()).collect()))
}

fn num<T: std::str::FromStr>(path: &Path, line: usize, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::InvalidArgument(format!("{}: row {}: cannot parse `{v}`", path.display(), line + 1)))
}

fn column(path: &Path, col: usize) -> Result<Vec<f64>> {
    let Some(rows) = read_rows(path)? else { return Ok(Vec::new()) };
    rows.iter()
        .enumerate()
        .map(|(i, r)| num(path, i, r.get(col).map(String::as_str).unwrap_or("")))
        .collect()
}

/// Rebuilds plot inputs from the CSVs of a run directory. Missing files
/// leave the matching fields empty.
pub fn read_plot_data(dir: &Path) -> Result<PlotData> {
    let mut data = PlotData {
        pretrain_loss: column(&dir.join("pretrain_loss.csv"), 1)?,
        naive_loss: column(&dir.join("finetune_loss.csv"), 1)?,
        projected_loss: column(&dir.join("finetune_loss.csv"), 2)?,
        ..PlotData::default()
    };
    let proj = dir.join("projection.csv");
    if proj.exists() {
        let text = fs::read_to_string(&proj).map_err(|e| Error::io(&proj, e))?;
        data.projection = text.lines().skip(1).filter(|l| !l.is_empty()).map(ProjectionReport::parse_csv_row).collect::<Result<_>>()?;
    }
    let amp = dir.join("amplification.csv");
    if let Some(rows) = read_rows(&amp)? {
        for (i, r) in rows.iter().enumerate() {
            if r.len() != 8 {
                return Err(Error::InvalidArgument(format!("{}: row {} has {} fields", amp.display(), i + 1, r.len())));
            }
            let row = AmplificationRow {
                n: num(&amp, i, &r[1])?,
                closed_form: num(&amp, i, &r[2])?,
                tv_bound: num(&amp, i, &r[3])?,
                empirical: num(&amp, i, &r[4])?,
                stderr: num(&amp, i, &r[5])?,
                tolerance: num(&amp, i, &r[6])?,
                within: num(&amp, i, &r[7])?,
            };
            data.amplification.push((r[0].clone(), row));
        }
    }
    let sc = dir.join("scatter.csv");
    if let Some(rows) = read_rows(&sc)? {
        for (i, r) in rows.iter().enumerate() {
            if r.len() != 3 {
                return Err(Error::InvalidArgument(format!("{}: row {} has {} fields", sc.display(), i + 1, r.len())));
            }
            data.scatter.push((r[0].clone(), [num(&sc, i, &r[1])?, num(&sc, i, &r[2])?]));
        }
    }
    Ok(data)
}

/// Aligned `key  value` text from `summary.csv`.
pub fn summary_text(dir: &Path) -> Result<String> {
    let path = dir.join("summary.csv");
    let rows = read_rows(&path)?.ok_or_else(|| Error::InvalidArgument(format!("{} not found", path.display())))?;
    let width = rows.iter().map(|r| r[0].len()).max().unwrap_or(0);
    Ok(rows.iter().map(|r| format!("{:width$}  {}\n", r[0], r[1..].join(","))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_what_a_run_directory_holds() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        fs::write(d.join("pretrain_loss.csv"), "step,loss\n0,1.5\n1,1.25\n").unwrap();
        fs::write(d.join("finetune_loss.csv"), "step,naive,projected\n0,0.5,0.75\n1,0.25,NaN\n").unwrap();
        fs::write(d.join("amplification.csv"), "stage,n,closed_form,tv_bound,empirical,stderr,tolerance,within\nnaive,5,0.4,0.3,0.41,0.01,0.05,true\n").unwrap();
        fs::write(d.join("scatter.csv"), "source,x,y\nprotected,1,2\n").unwrap();
        fs::write(d.join("summary.csv"), "key,value\nstage.pretrain,done\nprobe_accuracy,0.95\n").unwrap();
        let data = read_plot_data(d).unwrap();
        assert_eq!(data.pretrain_loss, vec![1.5, 1.25]);
        assert_eq!(data.naive_loss, vec![0.5, 0.25]);
        assert!(data.projected_loss[1].is_nan());
        assert_eq!(data.amplification[0].0, "naive");
        assert!(data.amplification[0].1.within);
        assert_eq!(data.scatter, vec![("protected".to_string(), [1.0, 2.0])]);
        assert!(data.projection.is_empty());
        let s = summary_text(d).unwrap();
        assert!(s.contains("stage.pretrain  done"));
    }

    #[test]
    fn malformed_rows_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("pretrain_loss.csv"), "step,loss\n0,abc\n").unwrap();
        let err = read_plot_data(dir.path()).unwrap_err().to_string();
        assert!(err.contains("row 1") && err.contains("abc"), "{err}");
        assert!(summary_text(dir.path()).is_err());
    }
}

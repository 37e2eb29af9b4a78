//! Flat-file output. Internals run in days; files are in hours.

use std::path::Path;

use serde::Serialize;

use crate::dae::Trajectory;
use crate::error::Result;
use crate::model::IDX_I;
use crate::params::ParameterSet;
use crate::scenario::HOURS_PER_DAY;

pub const TRAJECTORY_HEADER: [&str; 8] = ["t", "S", "X_m1", "X_e", "X_m2", "M_ox", "I_MEC", "I_density"];

/// `t,S,X_m1,X_e,X_m2,M_ox,I_MEC,I_density` with t in hours.
pub fn write_trajectory_csv<W: std::io::Write>(tr: &Trajectory, p: &ParameterSet, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRAJECTORY_HEADER)?;
    for (t, x) in tr.times.iter().zip(&tr.states) {
        let mut row = vec![format!("{}", t * HOURS_PER_DAY)];
        row.extend(x.iter().map(|v| format!("{v}")));
        row.push(format!("{}", p.current_density(x[IDX_I])));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct TrajectoryJson<'a> {
    t_hours: Vec<f64>,
    columns: [&'static str; 7],
    states: &'a [Vec<f64>],
    i_density: Vec<f64>,
    stats: &'a crate::dae::SolverStats,
}

pub fn write_trajectory_json<W: std::io::Write>(tr: &Trajectory, p: &ParameterSet, out: W) -> Result<()> {
    let doc = TrajectoryJson {
        t_hours: tr.times.iter().map(|t| t * HOURS_PER_DAY).collect(),
        columns: ["S", "X_m1", "X_e", "X_m2", "M_ox", "I_MEC", "I_density"],
        states: &tr.states,
        i_density: tr.states.iter().map(|x| p.current_density(x[IDX_I])).collect(),
        stats: &tr.stats,
    };
    serde_json::to_writer_pretty(out, &doc)?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

/// Creates `path` and hands a buffered writer to `f`.
pub fn with_file<F>(path: impl AsRef<Path>, f: F) -> Result<()>
where
    F: FnOnce(&mut std::io::BufWriter<std::fs::File>) -> Result<()>,
{
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    f(&mut w)?;
    std::io::Write::flush(&mut w)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario;

    #[test]
    fn csv_columns_and_hours() {
        let p = ParameterSet::reference();
        let x0 = scenario::reference_batch(&p).unwrap();
        let tr = scenario::simulate(&p, &x0, &scenario::hour_grid(2.0, 2), &scenario::mec_config(1e-8)).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&tr, &p, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,S,X_m1,X_e,X_m2,M_ox,I_MEC,I_density");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("2,"));
    }
}

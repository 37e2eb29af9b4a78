use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use mec_dae::calibrate::{self, Dataset, FitOptions};
use mec_dae::continuation::{self, StepPolicy};
use mec_dae::dae::IntegratorConfig;
use mec_dae::equilibria;
use mec_dae::scenario::{self, BatchStart, Closure};
use mec_dae::{io, sensitivity, Error, ParamId, ParameterSet};

#[derive(Parser, Debug)]
#[command(name = "mec", version, about = "Microbial electrolysis cell DAE toolkit")]
struct Cli {
    /// Parameter file (`name = value` lines); defaults to the built-in set.
    #[arg(long, global = true)]
    params: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "MEC_DAE_OUT", default_value = "mec-out")]
    out: PathBuf,
    #[arg(long, global = true, default_value_t = 1e-8)]
    rtol: f64,
    /// Absolute tolerance for every component (default: 1e-10, 1e-12 A on the current).
    #[arg(long, global = true)]
    atol: Option<f64>,
    /// Worker threads for parallel sweeps and sensitivity shards.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone, Serialize)]
struct Start {
    /// Initial exoelectrogen concentration (mg/L); the current is solved.
    #[arg(long, default_value_t = 250.0, conflicts_with = "density0")]
    xe0: f64,
    /// Initial current density (A/m^3); X_e(0) is solved instead.
    #[arg(long)]
    density0: Option<f64>,
    #[arg(long, default_value_t = 956.0)]
    s_init: f64,
    #[arg(long, default_value_t = 10.0)]
    xm1_init: f64,
    #[arg(long, default_value_t = 10.0)]
    xm2_init: f64,
    #[arg(long, default_value_t = 25.6)]
    mox_init: f64,
}

impl Start {
    fn batch(&self) -> BatchStart {
        BatchStart {
            s: self.s_init,
            x_m1: self.xm1_init,
            x_m2: self.xm2_init,
            m_ox: self.mox_init,
        }
    }

    fn closure(&self) -> Closure {
        match self.density0 {
            Some(d) => Closure::CurrentDensity(d),
            None => Closure::Exoelectrogens(self.xe0),
        }
    }
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Integrate a batch run.
    Simulate {
        #[arg(long, default_value_t = 45.0)]
        hours: f64,
        /// Output intervals.
        #[arg(long, default_value_t = 90)]
        points: usize,
        #[command(flatten)]
        start: Start,
    },
    /// Forward sensitivities of a batch run.
    Sense {
        #[arg(long, default_value_t = 45.0)]
        hours: f64,
        #[arg(long, default_value_t = 90)]
        points: usize,
        /// Comma-separated parameter names (default: the kinetic constants).
        #[arg(long, value_delimiter = ',')]
        subset: Option<Vec<String>>,
        #[command(flatten)]
        start: Start,
    },
    /// Equilibria and their spectra at one dilution rate.
    Equilibria {
        /// Dilution rate in 1/day (0 gives the washout family).
        #[arg(long = "d", default_value_t = 0.0)]
        d: f64,
        /// Substrate level of the washout point when D = 0.
        #[arg(long, default_value_t = 956.0)]
        substrate: f64,
    },
    /// Branches and transcritical points over a range of D.
    Bifurcate {
        /// `lo:hi` in 1/day.
        #[arg(long, default_value = "0.10:0.14")]
        d_range: String,
        /// Largest continuation step in D.
        #[arg(long, default_value_t = 2e-3)]
        step: f64,
    },
    /// Stable current density over flow rate and volume.
    Surface {
        /// `lo:hi:n` flow rates in mL/day.
        #[arg(long, default_value = "0:20:41")]
        f_in: String,
        /// `lo:hi:n` volumes in L.
        #[arg(long, default_value = "0.05:0.15:11")]
        volume: String,
    },
    /// Least-squares fit to a current-density series.
    Fit {
        /// `t_hours,I_density,sigma` CSV; synthetic data is generated when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "mu_max_e,q_max_e,Y_M")]
        fit_subset: Vec<String>,
        /// Starting values in subset order (default: current parameter values).
        #[arg(long, value_delimiter = ',')]
        start: Option<Vec<f64>>,
        /// Noise amplitude and seed of the generated data.
        #[arg(long, default_value_t = 2.0)]
        noise: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Divide residuals by the measurement errors.
        #[arg(long)]
        weighted: bool,
        /// Also screen this comma-separated set for identifiability.
        #[arg(long, value_delimiter = ',')]
        screen: Option<Vec<String>>,
    },
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io(_)
            | Error::UnknownParameter(_)
            | Error::Parse { .. }
            | Error::InvalidParameters(_)
            | Error::Invalid(_)
            | Error::Csv(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: msg.into(),
    }
}

fn parse_ids(names: &[String]) -> Result<Vec<ParamId>, Failure> {
    names
        .iter()
        .map(|n| n.parse::<ParamId>().map_err(Failure::from))
        .collect()
}

fn parse_range(s: &str) -> Result<(f64, f64), Failure> {
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        [a, b] => match (a.trim().parse::<f64>(), b.trim().parse::<f64>()) {
            (Ok(a), Ok(b)) if a < b => Ok((a, b)),
            _ => Err(usage(format!("range `{s}` must be lo:hi with lo < hi"))),
        },
        _ => Err(usage(format!("range `{s}` must be lo:hi"))),
    }
}

fn parse_grid(s: &str) -> Result<Vec<f64>, Failure> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || usage(format!("grid `{s}` must be lo:hi:n with lo <= hi and n >= 1"));
    let [a, b, n] = parts.as_slice() else {
        return Err(bad());
    };
    let (a, b, n) = match (a.trim().parse::<f64>(), b.trim().parse::<f64>(), n.trim().parse::<usize>()) {
        (Ok(a), Ok(b), Ok(n)) if a <= b && n >= 1 => (a, b, n),
        _ => return Err(bad()),
    };
    if n == 1 {
        return Ok(vec![a]);
    }
    Ok((0..n).map(|k| a + (b - a) * k as f64 / (n - 1) as f64).collect())
}

struct Run {
    out: PathBuf,
    files: Vec<String>,
}

impl Run {
    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.out.join(name)
    }
}

fn config(cli: &Cli) -> IntegratorConfig {
    let mut c = scenario::mec_config(cli.rtol);
    if let Some(a) = cli.atol {
        c.atol = vec![a; 6];
    }
    c
}

fn execute(cli: &Cli, p: &ParameterSet, run: &mut Run) -> Result<Value, Failure> {
    let cfg = config(cli);
    cfg.validate()?;
    match &cli.cmd {
        Cmd::Simulate { hours, points, start } => {
            if *hours < 0.0 {
                return Err(usage("--hours must be >= 0"));
            }
            let x0 = scenario::batch_initial_state(p, &start.batch(), start.closure())?;
            let tr = scenario::simulate(p, &x0, &scenario::hour_grid(*hours, *points), &cfg)?;
            io::with_file(run.path("trajectory.csv"), |w| io::write_trajectory_csv(&tr, p, w))?;
            io::with_file(run.path("trajectory.json"), |w| io::write_trajectory_json(&tr, p, w))?;
            Ok(json!({ "hours": hours, "points": points, "start": start }))
        }
        Cmd::Sense { hours, points, subset, start } => {
            let ids = match subset {
                Some(names) => parse_ids(names)?,
                None => ParamId::KINETIC.to_vec(),
            };
            if *hours <= 0.0 {
                return Err(usage("--hours must be > 0"));
            }
            let x0 = scenario::batch_initial_state(p, &start.batch(), start.closure())?;
            let grid = scenario::hour_grid(*hours, *points);
            let sens = sensitivity::solve_sharded(p, &x0, start.closure(), &ids, &grid, &cfg)?;
            io::with_file(run.path("sensitivities.csv"), |w| sensitivity::write_csv(&sens, w))?;
            io::with_file(run.path("trajectory.csv"), |w| io::write_trajectory_csv(&sens.trajectory, p, w))?;
            let names: Vec<&str> = ids.iter().map(|id| id.key()).collect();
            Ok(json!({ "hours": hours, "points": points, "subset": names, "start": start }))
        }
        Cmd::Equilibria { d, substrate } => {
            let pd = p.with(ParamId::D, *d);
            let reports = if *d == 0.0 {
                let e = equilibria::washout_equilibrium(&pd, *substrate)?;
                vec![equilibrium_json(&e)?]
            } else {
                // wide enough to contain both crossings for the default set
                let (lo, hi) = (0.5 * d.min(0.1), (2.0 * d).max(0.2));
                let dg = continuation::analyze(p, lo, hi, &StepPolicy::default())?;
                let mut out = Vec::new();
                for b in &dg.branches {
                    let (lo, hi) = b.d_range();
                    if *d < lo || *d > hi {
                        continue;
                    }
                    let seg = continuation::sweep_branch(b.start_for(*d), *d, &StepPolicy::default())?;
                    if let Some(e) = seg.points.iter().find(|e| e.params.d == *d) {
                        out.push(equilibrium_json(e)?);
                    }
                }
                out
            };
            io::write_json(run.path("equilibria.json"), &reports)?;
            Ok(json!({ "D": d, "substrate": substrate }))
        }
        Cmd::Bifurcate { d_range, step } => {
            let (lo, hi) = parse_range(d_range)?;
            let policy = StepPolicy {
                max: *step,
                initial: step.min(StepPolicy::default().initial),
                ..StepPolicy::default()
            };
            let dg = continuation::analyze(p, lo, hi, &policy)?;
            let records: Vec<_> = dg.bifurcations.iter().map(|b| b.report()).collect();
            io::write_json(run.path("bifurcations.json"), &records)?;
            io::with_file(run.path("branches.csv"), |w| continuation::write_branches_csv(&dg.branches, w))?;
            Ok(json!({ "d_range": [lo, hi], "step": step }))
        }
        Cmd::Surface { f_in, volume } => {
            let flows = parse_grid(f_in)?;
            let vols = parse_grid(volume)?;
            let samples = continuation::bifurcation_surface(p, &flows, &vols, &StepPolicy::default())?;
            io::with_file(run.path("surface.csv"), |w| continuation::write_surface_csv(&samples, w))?;
            Ok(json!({ "f_in": flows, "volume": vols }))
        }
        Cmd::Fit { data, fit_subset, start, noise, seed, weighted, screen } => {
            let ids = parse_ids(fit_subset)?;
            let dataset = match data {
                Some(path) => Dataset::from_file(path)?,
                None => {
                    let d = Dataset::synthetic(p, 45.0, 30, Some((*noise, *seed)))?;
                    let note = format!("synthetic batch from the parameter set, uniform noise +-{noise} A/m^3, seed {seed}");
                    io::with_file(run.path("data.csv"), |w| d.write_csv(w, Some(&note)))?;
                    d
                }
            };
            let theta0 = match start {
                Some(v) if v.len() == ids.len() => v.clone(),
                Some(_) => return Err(usage("--start needs one value per fitted parameter")),
                None => ids.iter().map(|id| p.get(*id)).collect(),
            };
            let opts = FitOptions {
                rtol: cli.rtol,
                weighted: *weighted,
                ..FitOptions::default()
            };
            let fit = calibrate::fit(&dataset, &ids, &theta0, p, &opts)?;
            let fitted = fit.fitted_params(p);
            let screen_report = match screen {
                Some(names) => Some(calibrate::identifiability_screen(&parse_ids(names)?, &dataset, &fitted, 1e6)?),
                None => None,
            };
            let theta: serde_json::Map<String, Value> =
                ids.iter().zip(&fit.theta).map(|(id, v)| (id.key().to_string(), json!(v))).collect();
            io::write_json(
                run.path("fit.json"),
                &json!({ "theta": theta, "result": fit, "identifiability": screen_report }),
            )?;
            std::fs::write(run.path("fitted.params"), fitted.to_params_string()).map_err(Error::from)?;
            Ok(json!({
                "data": data,
                "fit_subset": fit_subset,
                "start": theta0,
                "noise": noise,
                "seed": seed,
                "weighted": weighted,
                "options": opts,
            }))
        }
    }
}

fn equilibrium_json(e: &equilibria::EquilibriumPoint) -> Result<Value, Failure> {
    let spec = equilibria::schur_spectrum(e)?;
    let pencil = equilibria::pencil_spectrum(e)?;
    let mut v = serde_json::to_value(e.report()).map_err(Error::from)?;
    v["pencil_spectrum"] = json!(pencil.iter().map(|c| [c.re, c.im]).collect::<Vec<_>>());
    v["v"] = json!(spec.v);
    v["w"] = json!(spec.w);
    v["stable"] = json!(e.is_stable());
    Ok(v)
}

fn subcommand_name(cmd: &Cmd) -> &'static str {
    match cmd {
        Cmd::Simulate { .. } => "simulate",
        Cmd::Sense { .. } => "sense",
        Cmd::Equilibria { .. } => "equilibria",
        Cmd::Bifurcate { .. } => "bifurcate",
        Cmd::Surface { .. } => "surface",
        Cmd::Fit { .. } => "fit",
    }
}

fn load_params(path: Option<&Path>) -> Result<ParameterSet, Failure> {
    match path {
        Some(p) => ParameterSet::from_file(p).map_err(|e| usage(format!("{}: {e}", p.display()))),
        None => Ok(ParameterSet::reference()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = (|| -> Result<(), Failure> {
        if cli.jobs == 0 {
            return Err(usage("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global()
            .map_err(|e| usage(e.to_string()))?;
        let p = load_params(cli.params.as_deref())?;
        std::fs::create_dir_all(&cli.out).map_err(|e| usage(format!("{}: {e}", cli.out.display())))?;
        let mut run = Run {
            out: cli.out.clone(),
            files: Vec::new(),
        };
        let options = execute(&cli, &p, &mut run)?;
        let cfg = config(&cli);
        let params: serde_json::Map<String, Value> =
            ParamId::ALL.iter().map(|id| (id.key().to_string(), json!(p.get(*id)))).collect();
        let echo = json!({
            "subcommand": subcommand_name(&cli.cmd),
            "version": env!("CARGO_PKG_VERSION"),
            "params_file": cli.params,
            "params": params,
            "rtol": cfg.rtol,
            "atol": cfg.atol,
            "jobs": cli.jobs,
            "options": options,
            "outputs": run.files,
        });
        io::write_json(cli.out.join("run.json"), &echo)?;
        Ok(())
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("mec: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use fsi_core::bench::{
    metric_displacement_diff, metric_relative_diff, metric_velocity_diff, parse_config, preset, preset_names,
    read_solid_nodes_csv, run_case_with, write_outputs, EventKind, FieldSnapshot,
};
use fsi_core::schemes::Scheme;

const EXIT_IO: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_FIXED_POINT: u8 = 4;
const EXIT_SOLVER: u8 = 5;

#[derive(Parser)]
#[command(name = "fsi-bench", about = "FSI benchmark driver (explicit/implicit IFEM and one-field FDM)")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one case described by a key = value config file
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        scheme: Option<Scheme>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        t_end: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        snapshot_every: Option<usize>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Compare the solid-node series of two finished runs
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, value_enum)]
        metric: Metric,
        #[arg(long)]
        t: f64,
    },
    /// List the preset registry
    Presets,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Velocity,
    Displacement,
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

#[allow(clippy::too_many_arguments)]
fn run(
    config: PathBuf,
    scheme: Option<Scheme>,
    dt: Option<f64>,
    t_end: Option<f64>,
    out: Option<PathBuf>,
    snapshot_every: Option<usize>,
    threads: Option<usize>,
) -> ExitCode {
    let mut spec = match parse_config(&config) {
        Ok(s) => s,
        Err(fsi_core::bench::ConfigError::Io { path, source }) => {
            return fail(EXIT_IO, format!("cannot read {path}: {source}"))
        }
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    if let Some(s) = scheme {
        spec.cfg.scheme = s;
    }
    if let Some(dt) = dt {
        spec.case.dt = dt;
        spec.cfg.dt = dt;
    }
    if let Some(t) = t_end {
        spec.case.t_end = t;
        spec.cfg.t_end = t;
    }
    if let Some(n) = snapshot_every {
        spec.snapshot_every = n;
    }
    if let Err(e) = spec.validate() {
        return fail(EXIT_CONFIG, e);
    }
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return fail(EXIT_CONFIG, format!("cannot set thread count: {e}"));
        }
    }
    let out = out.unwrap_or_else(|| PathBuf::from(format!("out/{}-{}", spec.case.name, spec.cfg.scheme)));
    eprintln!(
        "{} with {}: dt = {:e}, t_end = {}, grid {}x{}",
        spec.case.name, spec.cfg.scheme, spec.cfg.dt, spec.cfg.t_end, spec.case.nx, spec.case.ny
    );

    let mut fields = Vec::new();
    let series = run_case_with(&spec.case, &spec.cfg, spec.snapshot_every, |sim, s| {
        eprintln!(
            "  step {:>7}  t = {:.5}  |u|_solid = {:.6e}  |Bu| = {:.2e}  fp = {}",
            s.step, s.t, s.velocity_norm, s.divergence, s.fp_iterations
        );
        fields.push(FieldSnapshot {
            step: s.step,
            t: s.t,
            u: sim.state.u.clone(),
            p: sim.state.p.clone(),
        });
    });
    let series = match series {
        Ok(s) => s,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let bg = match spec.case.build_problem() {
        Ok(p) => p.bg,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    if let Err(e) = write_outputs(&series, &fields, &bg, &out) {
        return fail(EXIT_IO, e);
    }
    eprintln!("outputs written to {}", out.display());
    match &series.event {
        None => ExitCode::SUCCESS,
        Some(ev) => {
            eprintln!("stopped at step {} (t = {}): {}", ev.step, ev.t, ev.message);
            ExitCode::from(match ev.kind {
                EventKind::Divergence => EXIT_DIVERGED,
                EventKind::FixedPointFailure => EXIT_FIXED_POINT,
                EventKind::SolverFailure => EXIT_SOLVER,
            })
        }
    }
}

fn compare(a: PathBuf, b: PathBuf, metric: Metric, t: f64) -> ExitCode {
    let load = |dir: &PathBuf| read_solid_nodes_csv(&dir.join("solid_nodes.csv"), &dir.display().to_string(), Scheme::OneFieldFdm);
    let (sa, sb) = match (load(&a), load(&b)) {
        (Ok(x), Ok(y)) => (x, y),
        (Err(e), _) | (_, Err(e)) => return fail(EXIT_IO, e),
    };
    let result = match metric {
        Metric::Velocity => metric_velocity_diff(&sa, &sb, t)
            .and_then(|abs| metric_relative_diff(&sa, &sb, t).map(|rel| (abs, Some(rel)))),
        Metric::Displacement => metric_displacement_diff(&sa, &sb, t).map(|d| (d, None)),
    };
    match result {
        Ok((abs, rel)) => {
            println!("abs {abs:.16e}");
            if let Some(r) = rel {
                println!("rel {r:.16e}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => fail(EXIT_CONFIG, e),
    }
}

fn presets() -> ExitCode {
    println!("{:<20} {:>6} {:>8} {:>5} {:>5} {:>8} {:>6} {:>9}", "name", "Re", "c1", "rho", "mu", "dt", "t_end", "grid");
    for name in preset_names() {
        let c = preset(&name).expect("registry names resolve");
        println!(
            "{:<20} {:>6} {:>8} {:>5} {:>5} {:>8.0e} {:>6} {:>9}",
            c.name,
            c.re,
            c.c1_tilde,
            c.rho_r,
            c.mu_r,
            c.dt,
            c.t_end,
            format!("{}x{}", c.nx, c.ny)
        );
    }
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match cli.command {
        Command::Run {
            config,
            scheme,
            dt,
            t_end,
            out,
            snapshot_every,
            threads,
        } => run(config, scheme, dt, t_end, out, snapshot_every, threads),
        Command::Compare { a, b, metric, t } => compare(a, b, metric, t),
        Command::Presets => presets(),
    }
}

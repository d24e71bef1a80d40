//! Command-line driver: `run`, `validate-graph`, `probe` and `plot`.
//!
//! Exit codes: 0 success, 1 failed validation or probe, 2 configuration or
//! input error, 3 numerical abort.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint::{checkpoint_path, Checkpoint};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::graph::{build_topology, metropolis_weights, mixing_rate, read_edge_list, validate_combination, TopologyKind};
use crate::metrics::meta_test;
use crate::netsim::{eval_set, run_with_sink, RunConfig};
use crate::probe::run_probe;
use crate::report::{metatest_lines, metrics_lines, plot_csv, METATEST_HEADER, METRICS_HEADER};
use crate::rng::{substream, GRAPH_STREAM};

#[derive(Parser, Debug)]
#[command(name = "difmaml", about = "Decentralized meta-learning by diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train every strategy listed in the config and write metrics.
    Run { config: PathBuf },
    /// Check a topology's Metropolis combination matrix.
    ValidateGraph {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        edges: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        p: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a theory probe: lemma1, lemma2, theorem1, theorem2 or unbiased.
    Probe { name: String, config: PathBuf },
    /// Render a metrics or meta-test CSV as an SVG line chart.
    Plot { csv: PathBuf, svg: PathBuf },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFiniteValue { .. } | Error::NoConvergence { .. } => 3,
        _ => 2,
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{e}");
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Run { config } => cmd_run(&config, out, err),
        Command::ValidateGraph { kind, k, edges, p, seed } => cmd_validate_graph(&kind, k, edges.as_deref(), p, seed, out),
        Command::Probe { name, config } => cmd_probe(&name, &config, out),
        Command::Plot { csv, svg } => cmd_plot(&csv, &svg).map(|_| 0),
    };
    result.unwrap_or_else(|e| {
        let _ = writeln!(err, "error: {e}");
        exit_code(&e)
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_line(w: &mut BufWriter<File>, line: &str) -> Result<()> {
    writeln!(w, "{line}")?;
    Ok(())
}

pub fn cmd_run(path: &Path, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let cfg = Config::load(path)?;
    let runs: Vec<RunConfig> = cfg
        .strategies
        .iter()
        .map(|s| cfg.run_config(*s))
        .collect::<Result<_>>()?;

    let mut csv = create(&cfg.csv)?;
    write_line(&mut csv, METRICS_HEADER)?;
    csv.flush()?;
    let mut metatest = match &cfg.metatest_csv {
        Some(p) => {
            let mut f = create(p)?;
            write_line(&mut f, METATEST_HEADER)?;
            Some(f)
        }
        None => None,
    };

    for rc in &runs {
        let name = rc.strategy.name();
        let result = run_with_sink(rc, &mut |row| {
            for line in metrics_lines(row) {
                write_line(&mut csv, &line)?;
            }
            csv.flush()?;
            Ok(())
        });
        let result = match result {
            Ok(r) => r,
            Err(e) => {
                csv.flush()?;
                let _ = writeln!(err, "{name}: aborted: {e}");
                return Err(e);
            }
        };
        if let Some(last) = result.rows.last() {
            let _ = writeln!(
                out,
                "{name}: iteration {} mean test loss {:.6} disagreement {:.3e} lambda2 {:.6}",
                last.iteration, last.mean_test_loss, last.disagreement, last.lambda2
            );
        } else {
            let _ = writeln!(out, "{name}: no evaluation rows");
        }
        if let Some(dir) = &cfg.ckpt_dir {
            std::fs::create_dir_all(dir)?;
            for (agent, w) in result.models.iter().enumerate() {
                Checkpoint {
                    agent,
                    iteration: rc.iterations,
                    w: w.clone(),
                }
                .save(&checkpoint_path(dir, name, agent))?;
            }
        }
        if let Some(f) = metatest.as_mut() {
            let tasks = eval_set(rc)?;
            let curves: Vec<Vec<f64>> = result
                .models
                .iter()
                .map(|w| meta_test(&rc.model, w, &tasks, rc.meta.alpha, cfg.metatest_steps))
                .collect::<Result<_>>()?;
            for line in metatest_lines(rc.strategy, &curves) {
                write_line(f, &line)?;
            }
            f.flush()?;
        }
    }
    Ok(0)
}

pub fn topology_kind(kind: &str, p: f64, edges: Option<&Path>) -> Result<TopologyKind> {
    Ok(match kind {
        "ring" => TopologyKind::Ring,
        "path" => TopologyKind::Path,
        "complete" => TopologyKind::Complete,
        "identity" => TopologyKind::Isolated,
        "erdos_renyi" => TopologyKind::ErdosRenyi { p },
        "explicit" => {
            let path = edges.ok_or_else(|| Error::Config("explicit topology needs --edges".into()))?;
            TopologyKind::Explicit(read_edge_list(path)?)
        }
        other => return Err(Error::Config(format!("unknown topology kind '{other}'"))),
    })
}

pub fn cmd_validate_graph(
    kind: &str,
    k: usize,
    edges: Option<&Path>,
    p: f64,
    seed: u64,
    out: &mut dyn Write,
) -> Result<i32> {
    let kind = topology_kind(kind, p, edges)?;
    let mut rng = substream(seed, GRAPH_STREAM);
    let topology = match build_topology(&kind, k, Some(&mut rng)) {
        Ok(t) => t,
        Err(Error::Disconnected) => {
            writeln!(out, "connected=false")?;
            writeln!(out, "FAIL")?;
            return Ok(1);
        }
        Err(e) => return Err(e),
    };
    let a = metropolis_weights(&topology);
    let report = validate_combination(&a);
    let lambda2 = if k == 1 { 0.0 } else { mixing_rate(&a)? };
    writeln!(out, "kind={} k={k} edges={}", kind.name(), topology.edge_count())?;
    writeln!(out, "nonnegative={}", report.nonnegative)?;
    writeln!(out, "doubly_stochastic={}", report.doubly_stochastic)?;
    writeln!(out, "symmetric={}", a.is_symmetric())?;
    writeln!(out, "primitive={}", report.primitive)?;
    writeln!(out, "lambda2={lambda2:.6}")?;
    let ok = report.all_pass();
    writeln!(out, "{}", if ok { "PASS" } else { "FAIL" })?;
    Ok(if ok { 0 } else { 1 })
}

pub fn cmd_probe(name: &str, path: &Path, out: &mut dyn Write) -> Result<i32> {
    let cfg = Config::load(path)?;
    let rc = cfg.run_config(cfg.strategies[0])?;
    let report = run_probe(name, &rc).map_err(|e| match e {
        Error::UnsupportedFamily { expected } => Error::Config(format!("probe '{name}' needs a {expected} config")),
        other => other,
    })?;
    write!(out, "{}", report.to_csv())?;
    writeln!(out, "{}", report.summary())?;
    Ok(if report.passed() { 0 } else { 1 })
}

pub fn cmd_plot(csv: &Path, svg: &Path) -> Result<()> {
    let text = std::fs::read_to_string(csv)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", csv.display())))?;
    let rendered = plot_csv(&text)?;
    let mut f = create(svg)?;
    f.write_all(rendered.as_bytes())?;
    f.flush()?;
    Ok(())
}

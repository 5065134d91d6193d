//! `pqnet`: generate streams, train, evaluate, sweep and tabulate.
//!
//! Any flag a subcommand does not declare is taken as a config override:
//! `--lambda 0.05`, `--anchor-sign attract`. A bare `--flag` sets a boolean
//! field to true and `--no-flag` sets it to false.

use std::collections::HashSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};
use rayon::prelude::*;

use protoquad::bank::PrototypeBank;
use protoquad::config::RunConfig;
use protoquad::eval::{session_accuracy, RunReport};
use protoquad::extractor::{read_checkpoint, write_checkpoint};
use protoquad::sampler::write_stream;
use protoquad::trainer::{run_stream, Learner};
use protoquad::Error;

#[derive(Debug, Parser)]
#[command(name = "pqnet", version, about = "Few-shot class-incremental training with prototype quadruplets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic stream of a config as CSV plus manifest.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on every session and write report, accuracy table and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Score saved checkpoints on the test splits.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        /// Score only this session (1-based); all sessions by default.
        #[arg(long)]
        session: Option<usize>,
    },
    /// Train one run per grid cell. `--param`/`--values` pairs repeat; the
    /// grid is their product.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
        #[arg(long, required = true)]
        param: Vec<String>,
        /// Comma-separated values for the matching `--param`.
        #[arg(long, required = true)]
        values: Vec<String>,
    },
    /// Merge report files into one CSV table (stdout unless `--out`).
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Splits the override flags a subcommand does not declare off `argv`.
fn split_overrides(argv: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let cmd = Cli::command();
    let Some(sub) = argv.get(1).and_then(|s| cmd.find_subcommand(s)) else {
        return (argv, Vec::new());
    };
    let known: HashSet<String> = sub
        .get_arguments()
        .filter_map(|a| a.get_long().map(str::to_string))
        .chain(["help".to_string()])
        .collect();
    let mut kept = argv[..2].to_vec();
    let mut overrides = Vec::new();
    let mut it = argv.into_iter().skip(2).peekable();
    while let Some(arg) = it.next() {
        let Some(name) = arg.strip_prefix("--").filter(|n| !n.is_empty()) else {
            kept.push(arg);
            continue;
        };
        let (name, inline) = match name.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (name.to_string(), None),
        };
        if known.contains(&name) {
            kept.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None if it.peek().is_some_and(|n| !n.starts_with("--")) => it.next().unwrap(),
            None => match name.strip_prefix("no-") {
                Some(stripped) => {
                    overrides.push((stripped.to_string(), "false".to_string()));
                    continue;
                }
                None => "true".to_string(),
            },
        };
        overrides.push((name, value));
    }
    (kept, overrides)
}

/// Config file, then `PQ_SEED`, then command-line overrides.
fn load_config(path: &Path, overrides: &[(String, String)]) -> protoquad::Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Ok(seed) = std::env::var("PQ_SEED") {
        cfg.plan.seed = seed
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("PQ_SEED is not an unsigned integer: {seed}")))?;
    }
    let cfg = cfg.with_overrides(overrides.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> protoquad::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_run(dir: &Path, report: &RunReport) -> protoquad::Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("report.json"), report)?;
    report.write_accuracy_csv(fs::File::create(dir.join("accuracy.csv"))?)
}

fn gen_data(config: &Path, out: &Path, overrides: &[(String, String)]) -> protoquad::Result<()> {
    let cfg = load_config(config, overrides)?;
    if cfg.synthetic.is_none() {
        return Err(Error::Config("gen-data needs a `synthetic` stream spec".into()));
    }
    let manifest = write_stream(&cfg.stream()?, out)?;
    println!(
        "wrote {} sessions ({} classes) to {}",
        manifest.sessions.len(),
        manifest.sessions.iter().map(Vec::len).sum::<usize>(),
        out.display()
    );
    Ok(())
}

fn train(config: &Path, out: &Path, overrides: &[(String, String)]) -> protoquad::Result<()> {
    let cfg = load_config(config, overrides)?;
    let stream = cfg.stream()?;
    let outcome = run_stream(&stream, &cfg)?;
    write_run(out, &outcome.report)?;
    let l = &outcome.learner;
    write_checkpoint(&mut fs::File::create(out.join("net.pqnet"))?, &l.mlp, &l.head, &l.mask)?;
    l.bank.write_snapshot(&mut fs::File::create(out.join("bank.pqbank"))?)?;
    println!(
        "final accuracy {:.4}, bwt {}",
        outcome.report.final_accuracy,
        outcome
            .report
            .backward_transfer
            .map_or("n/a".to_string(), |b| format!("{b:.4}"))
    );
    Ok(())
}

#[derive(serde::Serialize)]
struct EvalRow {
    session: usize,
    samples: usize,
    accuracy: Option<f64>,
}

fn eval(
    config: &Path,
    net: &Path,
    bank: &Path,
    session: Option<usize>,
    overrides: &[(String, String)],
) -> protoquad::Result<()> {
    let cfg = load_config(config, overrides)?;
    let stream = cfg.stream()?;
    let (mlp, head, mask) = read_checkpoint(&mut io::BufReader::new(fs::File::open(net)?))?;
    let bank = PrototypeBank::read_snapshot(&mut io::BufReader::new(fs::File::open(bank)?))?;
    let learner = Learner { mlp, head, bank, mask };
    let sessions: Vec<usize> = match session {
        Some(s) if s == 0 || s > stream.sessions() => {
            return Err(Error::Config(format!(
                "session {s} outside 1..={}",
                stream.sessions()
            )))
        }
        Some(s) => vec![s],
        None => (1..=stream.sessions()).collect(),
    };
    let seen: Vec<usize> = stream.train.iter().flat_map(|s| s.labels.iter().copied()).collect();
    let mut rows = Vec::new();
    for s in sessions {
        let split = &stream.test[s - 1];
        let acc = session_accuracy(&learner, cfg.plan.classifier(), &seen, std::slice::from_ref(split))?;
        rows.push(EvalRow {
            session: s,
            samples: split.len(),
            accuracy: acc[0],
        });
    }
    println!("{}", serde_json::to_string_pretty(&rows)?);
    Ok(())
}

fn sweep(
    config: &Path,
    out: &Path,
    params: &[String],
    values: &[String],
    overrides: &[(String, String)],
) -> protoquad::Result<()> {
    if params.len() != values.len() {
        return Err(Error::Config("every --param needs one --values list".into()));
    }
    let base = load_config(config, overrides)?;
    let axes: Vec<Vec<String>> = values
        .iter()
        .map(|v| v.split(',').map(|s| s.trim().to_string()).collect())
        .collect();
    let mut cells: Vec<Vec<String>> = vec![Vec::new()];
    for axis in &axes {
        cells = cells
            .into_iter()
            .flat_map(|c| {
                axis.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push(v.clone());
                    c
                })
            })
            .collect();
    }
    let configs = cells
        .iter()
        .enumerate()
        .map(|(i, cell)| {
            let mut cfg = base.with_overrides(params.iter().map(String::as_str).zip(cell.iter().map(String::as_str)))?;
            cfg.plan.seed = base.plan.seed ^ i as u64;
            cfg.validate()?;
            Ok(cfg)
        })
        .collect::<protoquad::Result<Vec<_>>>()?;
    fs::create_dir_all(out)?;
    let reports = configs
        .par_iter()
        .enumerate()
        .map(|(i, cfg)| {
            let report = run_stream(&cfg.stream()?, cfg)?.report;
            write_run(&out.join(format!("cell_{i:03}")), &report)?;
            Ok(report)
        })
        .collect::<protoquad::Result<Vec<_>>>()?;

    let mut w = csv::Writer::from_path(out.join("sweep.csv")).map_err(csv_err)?;
    let mut header = vec!["cell".to_string(), "seed".to_string()];
    header.extend(params.iter().cloned());
    header.extend(["final_accuracy", "bwt", "memory_vectors"].map(String::from));
    w.write_record(&header).map_err(csv_err)?;
    for (i, (cell, r)) in cells.iter().zip(&reports).enumerate() {
        let mut rec = vec![i.to_string(), r.seed.to_string()];
        rec.extend(cell.iter().cloned());
        rec.push(r.final_accuracy.to_string());
        rec.push(r.backward_transfer.map(|b| b.to_string()).unwrap_or_default());
        rec.push(r.memory.vectors.to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    println!("{} cells written to {}", cells.len(), out.display());
    Ok(())
}

fn report(paths: &[PathBuf], out: Option<&Path>) -> protoquad::Result<()> {
    let reports = paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p)?;
            RunReport::from_json(&text).map_err(|e| Error::Data(format!("{}: {e}", p.display())))
        })
        .collect::<protoquad::Result<Vec<_>>>()?;
    let sessions = reports.iter().map(|r| r.cumulative.len()).max().unwrap_or(0);
    let sink: Box<dyn io::Write> = match out {
        Some(p) => Box::new(fs::File::create(p)?),
        None => Box::new(io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec!["run".to_string(), "seed".to_string()];
    header.extend((1..=sessions).map(|s| format!("session_{s}")));
    header.extend(["bwt", "memory_vectors"].map(String::from));
    w.write_record(&header).map_err(csv_err)?;
    for (p, r) in paths.iter().zip(&reports) {
        let mut rec = vec![p.display().to_string(), r.seed.to_string()];
        rec.extend((0..sessions).map(|s| r.cumulative.get(s).map(|a| format!("{:.2}", 100.0 * a)).unwrap_or_default()));
        rec.push(r.backward_transfer.map(|b| format!("{:.2}", 100.0 * b)).unwrap_or_default());
        rec.push(r.memory.vectors.to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(e.to_string())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Io(_) | Error::Json(_) | Error::Contract(_) => 3,
        Error::Numerical { .. } => 4,
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("PQ_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| format!("PQ_THREADS is not a positive integer: {raw}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let (argv, overrides) = split_overrides(std::env::args().collect());
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    let result = match &cli.command {
        Command::GenData { config, out } => gen_data(config, out, &overrides),
        Command::Train { config, out } => train(config, out, &overrides),
        Command::Eval {
            config,
            net,
            bank,
            session,
        } => eval(config, net, bank, *session, &overrides),
        Command::Sweep {
            config,
            out,
            param,
            values,
        } => sweep(config, out, param, values, &overrides),
        Command::Report { reports, out } => {
            if !overrides.is_empty() {
                eprintln!("error: report takes no config overrides");
                return ExitCode::from(1);
            }
            report(reports, out.as_deref())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

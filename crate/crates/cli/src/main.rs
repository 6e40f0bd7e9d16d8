//! `gradc`: differentiate, run, check and benchmark programs.
//!
//! Exit codes: 0 on success, 1 on diagnostics (syntax or validation
//! errors, runtime failures, gradient-check failures), 2 on usage errors.

mod literal;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use gradc::api::{grad, grad_forward, hvp, GradOptions};
use gradc::ast::Program;
use gradc::bench::{bench_lattice, ArrayMode, BenchConfig, CSV_HEADER};
use gradc::check::{check_gradient, Tolerances};
use gradc::corpus::{load_manifest, ArgSpec, Case};
use gradc::eval::{run_with, EvalOptions};
use gradc::optimizer::OptimizeOptions;
use gradc::parser::parse;
use gradc::printer::emit_source;
use gradc::validate::{validate, Severity};
use gradc::value::Value;

#[derive(Parser)]
#[command(name = "gradc", version, about = "Source-transformation automatic differentiation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Mode {
    Reverse,
    Forward,
    Hvp,
}

#[derive(Subcommand)]
enum Command {
    /// Print the source of a derivative.
    Grad {
        file: PathBuf,
        #[arg(long)]
        entry: String,
        /// Parameter indices to differentiate with respect to.
        #[arg(long, value_delimiter = ',', required = true)]
        wrt: Vec<usize>,
        #[arg(long, value_enum, default_value = "reverse")]
        mode: Mode,
        /// Derivative order (reverse mode only).
        #[arg(long, default_value_t = 1)]
        order: usize,
        #[arg(long)]
        no_optimize: bool,
        /// Do not rewrite `x * 0` to `0`.
        #[arg(long)]
        no_unsafe_algebra: bool,
        /// Write to this file instead of stdout.
        #[arg(short = 'o', long = "output")]
        output: Option<PathBuf>,
    },
    /// Evaluate a function on literal arguments and print the result.
    Run {
        file: PathBuf,
        #[arg(long)]
        entry: String,
        /// Comma-separated arguments: numbers, True/False, nested [...] lists.
        #[arg(long, default_value = "", allow_hyphen_values = true)]
        args: String,
    },
    /// Compare the reverse-mode gradient with central finite differences.
    Check {
        file: PathBuf,
        #[arg(long)]
        entry: String,
        #[arg(long, value_delimiter = ',', required = true)]
        wrt: Vec<usize>,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        rtol: f64,
        #[arg(long, default_value_t = 1e-6)]
        atol: f64,
        /// Literal arguments (as for `run`).
        #[arg(long, allow_hyphen_values = true)]
        args: Option<String>,
        /// Input generators, one per parameter, in corpus-manifest syntax.
        /// Without --args or --inputs, a manifest next to FILE is
        /// consulted, then standard normal scalars are used.
        #[arg(long, allow_hyphen_values = true)]
        inputs: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// The program uses a custom gradient on purpose: report a
        /// mismatch without failing.
        #[arg(long)]
        expect_custom: bool,
    },
    /// Run a benchmark and print CSV rows.
    Bench {
        #[arg(value_parser = ["lattice"])]
        which: String,
        /// Outer iterations; a comma-separated list gives one row each.
        #[arg(long, value_delimiter = ',', default_value = "25,50,100,200")]
        n: Vec<usize>,
        #[arg(long, default_value_t = 15)]
        m: usize,
        #[arg(long, default_value_t = 2000)]
        d: usize,
        /// immutable, subarray, persistent or all.
        #[arg(long, default_value = "all")]
        mode: String,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load(path: &Path) -> Result<Program> {
    let src = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    parse(&src).map_err(|e| anyhow!("{}: {e}", path.display()))
}

/// Print validation warnings; errors surface through the transform.
fn warn(p: &Program, entry: &str, wrt: &[usize]) {
    if let Ok(diags) = validate(p, entry, wrt) {
        for d in diags.iter().filter(|d| d.severity == Severity::Warning) {
            eprintln!("{d}");
        }
    }
}

fn execute(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Grad {
            file,
            entry,
            wrt,
            mode,
            order,
            no_optimize,
            no_unsafe_algebra,
            output,
        } => {
            let p = load(&file)?;
            warn(&p, &entry, &wrt);
            let opts = GradOptions {
                optimize: !no_optimize,
                opt: OptimizeOptions {
                    unsafe_algebra: !no_unsafe_algebra,
                },
            };
            if mode != Mode::Reverse && order != 1 {
                bail!("--order applies to reverse mode only");
            }
            let d = match mode {
                Mode::Reverse => grad(&p, &entry, &wrt, order, &opts)?,
                Mode::Forward => grad_forward(&p, &entry, &wrt, &opts)?,
                Mode::Hvp => hvp(&p, &entry, &wrt, &opts)?,
            };
            let text = emit_source(&d.program);
            match output {
                Some(path) => fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?,
                None => print!("{text}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Run { file, entry, args } => {
            let p = load(&file)?;
            let args = literal::parse_args(&args)?;
            let out = run_with(&p, &entry, args, EvalOptions::default())?;
            println!("{}", out.value);
            Ok(ExitCode::SUCCESS)
        }
        Command::Check {
            file,
            entry,
            wrt,
            eps,
            rtol,
            atol,
            args,
            inputs,
            seed,
            expect_custom,
        } => {
            let p = load(&file)?;
            let f = p.function(&entry).ok_or_else(|| anyhow!("unknown function '{entry}'"))?;
            let args = match (args, inputs) {
                (Some(a), _) => literal::parse_args(&a)?,
                (None, Some(spec)) => sample(&entry, &spec, seed)?,
                (None, None) => match manifest_inputs(&file, &entry)? {
                    Some(case) => case.sample_args(seed)?,
                    None => sample(&entry, &vec!["s"; f.params.len()].join(","), seed)?,
                },
            };
            let tol = Tolerances { eps, rtol, atol };
            let report = check_gradient(&p, &entry, &wrt, &args, &tol, &GradOptions::default())?;
            println!("{report}");
            if report.passed() {
                Ok(ExitCode::SUCCESS)
            } else if expect_custom {
                println!("(mismatch expected: custom gradient)");
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(1))
            }
        }
        Command::Bench {
            which: _,
            n,
            m,
            d,
            mode,
            repeats,
        } => {
            let modes: Vec<ArrayMode> = if mode == "all" {
                ArrayMode::ALL.to_vec()
            } else {
                mode.split(',').map(str::parse).collect::<Result<_, _>>()?
            };
            println!("{CSV_HEADER}");
            for mode in modes {
                for &n in &n {
                    let row = bench_lattice(&BenchConfig { n, m, d, mode, repeats })?;
                    println!("{}", row.csv());
                }
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn sample(entry: &str, spec: &str, seed: u64) -> Result<Vec<Value>> {
    let case = Case {
        name: entry.to_string(),
        file: String::new(),
        entry: entry.to_string(),
        wrt: vec![],
        inputs: spec.split(',').map(ArgSpec::parse).collect::<Result<_, _>>()?,
        golden: None,
        tolerances: Tolerances::default(),
    };
    Ok(case.sample_args(seed)?)
}

/// The first manifest case for this file and entry, if the file sits in a
/// corpus directory.
fn manifest_inputs(file: &Path, entry: &str) -> Result<Option<Case>> {
    let dir = file.parent().unwrap_or(Path::new("."));
    if !dir.join("manifest").exists() {
        return Ok(None);
    }
    let name = file.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    Ok(load_manifest(dir)?
        .into_iter()
        .find(|c| c.file == name && c.entry == entry))
}

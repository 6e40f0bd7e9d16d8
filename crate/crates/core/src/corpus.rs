//! The program corpus: a manifest of differentiation cases with input
//! generators, optional golden derivative sources, and a runner that
//! checks each case end to end.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::api::{grad, GradOptions};
use crate::ast::*;
use crate::builtins::{Group, BUILTINS};
use crate::check::{check_gradient, CheckReport, Tolerances};
use crate::eval::eval_program;
use crate::parser::parse;
use crate::printer::emit_source;
use crate::validate::ensure_valid;
use crate::value::{DenseArray, Value};
use crate::{Error, Result};

/// Generator for one argument.
#[derive(Debug, Clone, PartialEq)]
pub enum ArgSpec {
    Normal { shape: Vec<usize>, scale: f64 },
    Uniform(f64, f64),
    Float(f64),
    Int(i64),
    OneHot(usize, usize),
}

impl ArgSpec {
    pub fn parse(s: &str) -> Result<ArgSpec> {
        let bad = || Error::runtime(format!("bad input generator '{s}'"));
        let num = |t: &str| t.parse::<f64>().map_err(|_| bad());
        let dims = |t: &str| -> Result<Vec<usize>> {
            t.split('x').map(|d| d.parse::<usize>().map_err(|_| bad())).collect()
        };
        let (body, scale) = match s.split_once('*') {
            Some((b, k)) => (b, num(k)?),
            None => (s, 1.0),
        };
        let (kind, rest) = body.split_once(':').unwrap_or((body, ""));
        Ok(match kind {
            "s" => ArgSpec::Normal { shape: vec![], scale },
            "v" | "m" => ArgSpec::Normal { shape: dims(rest)?, scale },
            "u" => {
                let (a, b) = rest.split_once(':').ok_or_else(bad)?;
                ArgSpec::Uniform(num(a)?, num(b)?)
            }
            "f" => ArgSpec::Float(num(rest)?),
            "i" => ArgSpec::Int(rest.parse().map_err(|_| bad())?),
            "onehot" => match dims(rest)?.as_slice() {
                [r, c] => ArgSpec::OneHot(*r, *c),
                _ => return Err(bad()),
            },
            _ => return Err(bad()),
        })
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Result<Value> {
        Ok(match self {
            ArgSpec::Normal { shape, scale } if shape.is_empty() => {
                Value::Float(scale * rng.sample::<f64, _>(StandardNormal))
            }
            ArgSpec::Normal { shape, scale } => {
                let n = shape.iter().product();
                let data = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
                Value::dense(DenseArray::new(shape.clone(), data)?)
            }
            ArgSpec::Uniform(a, b) => Value::Float(rng.random_range(*a..*b)),
            ArgSpec::Float(x) => Value::Float(*x),
            ArgSpec::Int(k) => Value::Int(*k),
            ArgSpec::OneHot(r, c) => {
                let mut data = vec![0.0; r * c];
                for row in 0..*r {
                    data[row * c + rng.random_range(0..*c)] = 1.0;
                }
                Value::dense(DenseArray::new(vec![*r, *c], data)?)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub name: String,
    pub file: String,
    pub entry: String,
    pub wrt: Vec<usize>,
    pub inputs: Vec<ArgSpec>,
    pub golden: Option<String>,
    pub tolerances: Tolerances,
}

impl Case {
    pub fn program(&self, dir: &Path) -> Result<Program> {
        let path = dir.join(&self.file);
        let src = fs::read_to_string(&path)
            .map_err(|e| Error::runtime(format!("cannot read {}: {e}", path.display())))?;
        parse(&src)
    }

    /// Deterministic arguments for trial number `trial`.
    pub fn sample_args(&self, trial: u64) -> Result<Vec<Value>> {
        let seed = self
            .name
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ trial.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        self.inputs.iter().map(|s| s.sample(&mut rng)).collect()
    }
}

/// Parse the manifest text.
pub fn parse_manifest(text: &str) -> Result<Vec<Case>> {
    let mut cases = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| Error::runtime(format!("manifest line {}: {what}", k + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 5 {
            return Err(bad("expected NAME FILE ENTRY WRT INPUTS"));
        }
        let wrt = fields[3]
            .split(',')
            .map(|w| w.parse::<usize>().map_err(|_| bad("bad wrt list")))
            .collect::<Result<Vec<_>>>()?;
        let inputs = fields[4].split(',').map(ArgSpec::parse).collect::<Result<Vec<_>>>()?;
        let mut case = Case {
            name: fields[0].to_string(),
            file: fields[1].to_string(),
            entry: fields[2].to_string(),
            wrt,
            inputs,
            golden: None,
            tolerances: Tolerances::default(),
        };
        for opt in &fields[5..] {
            let (key, value) = opt.split_once('=').ok_or_else(|| bad("options are key=value"))?;
            let num = || value.parse::<f64>().map_err(|_| bad("bad number"));
            match key {
                "golden" => case.golden = Some(value.to_string()),
                "rtol" => case.tolerances.rtol = num()?,
                "atol" => case.tolerances.atol = num()?,
                "eps" => case.tolerances.eps = num()?,
                _ => return Err(bad(&format!("unknown option '{key}'"))),
            }
        }
        cases.push(case);
    }
    Ok(cases)
}

pub fn load_manifest(dir: &Path) -> Result<Vec<Case>> {
    let path = dir.join("manifest");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::runtime(format!("cannot read {}: {e}", path.display())))?;
    parse_manifest(&text)
}

/// Location of the corpus shipped with this crate.
pub fn default_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("corpus")
}

/// Run a derivative, insisting that every tape ends up empty.
pub fn run_checked(p: &Program, entry: &str, args: Vec<Value>) -> Result<Value> {
    let (v, tapes) = eval_program(p, entry, args)?;
    if let Some(t) = tapes.iter().find(|t| !t.is_empty()) {
        return Err(Error::runtime(format!("tape left with {} entries", t.len())));
    }
    Ok(v)
}

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: String,
    /// `None` when the case has no golden file.
    pub golden_matches: Option<bool>,
    /// Optimized and unoptimized derivatives agreed bitwise on every trial.
    pub optimizer_sound: bool,
    pub check: CheckReport,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.golden_matches != Some(false) && self.optimizer_sound && self.check.passed()
    }
}

/// Validate, differentiate, compare against the golden file, compare
/// optimized with unoptimized output on `trials` inputs, and check the
/// gradient against finite differences on the first input.
pub fn run_case(dir: &Path, case: &Case, trials: u64) -> Result<CaseResult> {
    let p = case.program(dir)?;
    ensure_valid(&p, &case.entry, &case.wrt)?;
    let opt = grad(&p, &case.entry, &case.wrt, 1, &GradOptions::default())?;
    let raw = grad(&p, &case.entry, &case.wrt, 1, &GradOptions { optimize: false, ..GradOptions::default() })?;
    let golden_matches = match &case.golden {
        Some(g) => {
            let want = fs::read_to_string(dir.join(g))
                .map_err(|e| Error::runtime(format!("cannot read golden {g}: {e}")))?;
            Some(emit_source(&opt.program) == want)
        }
        None => None,
    };
    let mut optimizer_sound = true;
    for t in 0..trials {
        let args = case.sample_args(t)?;
        let a = run_checked(&opt.program, &opt.entry, args.clone())?;
        let b = run_checked(&raw.program, &raw.entry, args)?;
        optimizer_sound &= a.bitwise_eq(&b);
    }
    let check = check_gradient(
        &p,
        &case.entry,
        &case.wrt,
        &case.sample_args(0)?,
        &case.tolerances,
        &GradOptions::default(),
    )?;
    Ok(CaseResult {
        name: case.name.clone(),
        golden_matches,
        optimizer_sound,
        check,
    })
}

/// Run every case of the corpus in `dir`. A case that errors is reported
/// with the case name.
pub fn run_corpus(dir: &Path, trials: u64) -> Result<Vec<CaseResult>> {
    load_manifest(dir)?
        .iter()
        .map(|c| run_case(dir, c, trials).map_err(|e| Error::runtime(format!("case '{}': {e}", c.name))))
        .collect()
}

/// Statement kinds and kernel builtins that no corpus program uses.
pub fn uncovered(dir: &Path) -> Result<(Vec<&'static str>, Vec<&'static str>)> {
    let mut stmts = BTreeSet::new();
    let mut calls = BTreeSet::new();
    let files: BTreeSet<String> = load_manifest(dir)?.into_iter().map(|c| c.file).collect();
    for file in files {
        let src = fs::read_to_string(dir.join(&file)).map_err(|e| Error::runtime(e.to_string()))?;
        let p = parse(&src)?;
        for f in &p.functions {
            walk_stmts(&f.body, &mut |s| {
                stmts.insert(stmt_kind_name(&s.kind));
                for e in s.exprs() {
                    calls.extend(e.calls());
                    e.walk(&mut |x| {
                        if let Expr::BinOp { op, .. } = x {
                            calls.extend(op.primitive().map(str::to_string));
                        }
                        if let Expr::Neg(_) = x {
                            calls.insert("negative".to_string());
                        }
                    });
                }
            });
        }
    }
    let all_stmts = [
        "assign", "index_assign", "if", "while", "for", "return", "expr", "insert_grad_of", "comment",
    ];
    let missing_stmts = all_stmts.into_iter().filter(|k| !stmts.contains(k)).collect();
    let missing_kernels = BUILTINS
        .iter()
        .filter(|b| b.group == Group::Kernel && !calls.contains(b.name))
        .map(|b| b.name)
        .collect();
    Ok((missing_stmts, missing_kernels))
}

fn stmt_kind_name(k: &StmtKind) -> &'static str {
    match k {
        StmtKind::Assign { .. } => "assign",
        StmtKind::IndexAssign { .. } => "index_assign",
        StmtKind::If { .. } => "if",
        StmtKind::While { .. } => "while",
        StmtKind::ForRange { .. } => "for",
        StmtKind::Return(_) => "return",
        StmtKind::ExprStmt(_) => "expr",
        StmtKind::InsertGradOf { .. } => "insert_grad_of",
        StmtKind::Comment(_) => "comment",
        StmtKind::Unsupported { .. } => "unsupported",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_parse() {
        assert_eq!(ArgSpec::parse("s").unwrap(), ArgSpec::Normal { shape: vec![], scale: 1.0 });
        assert_eq!(ArgSpec::parse("m:3x4*0.1").unwrap(), ArgSpec::Normal { shape: vec![3, 4], scale: 0.1 });
        assert_eq!(ArgSpec::parse("u:-4:4").unwrap(), ArgSpec::Uniform(-4.0, 4.0));
        assert_eq!(ArgSpec::parse("onehot:2x3").unwrap(), ArgSpec::OneHot(2, 3));
        assert!(ArgSpec::parse("q:1").is_err());
    }

    #[test]
    fn samples_are_deterministic() {
        let cases = parse_manifest("a f.tg f 0 v:3,onehot:4x2\n").unwrap();
        let x = cases[0].sample_args(3).unwrap();
        let y = cases[0].sample_args(3).unwrap();
        assert!(x[0].bitwise_eq(&y[0]) && x[1].bitwise_eq(&y[1]));
        let rows = x[1].to_dense().unwrap().data().chunks(2).map(|r| r.iter().sum::<f64>()).collect::<Vec<_>>();
        assert_eq!(rows, vec![1.0; 4]);
    }

    #[test]
    fn manifest_options() {
        let cases = parse_manifest("# comment\nsq sq.tg f 0,1 s,i:3 golden=sq.golden.tg rtol=1e-3\n").unwrap();
        assert_eq!(cases[0].wrt, vec![0, 1]);
        assert_eq!(cases[0].golden.as_deref(), Some("sq.golden.tg"));
        assert_eq!(cases[0].tolerances.rtol, 1e-3);
        assert!(parse_manifest("sq sq.tg f\n").is_err());
    }
}

use std::path::PathBuf;
use std::process::{Command, Output};

fn gradc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradc"))
        .args(args)
        .output()
        .expect("gradc runs")
}

fn corpus(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../core/corpus")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn grad_prints_the_golden_derivative() {
    let o = gradc(&["grad", &corpus("square.tg"), "--entry", "f", "--wrt", "0"]);
    assert_eq!(o.status.code(), Some(0));
    let golden = std::fs::read_to_string(corpus("square.golden.tg")).unwrap();
    assert_eq!(stdout(&o), golden);
    let again = gradc(&["grad", &corpus("square.tg"), "--entry", "f", "--wrt", "0"]);
    assert_eq!(o.stdout, again.stdout);
}

#[test]
fn unoptimized_output_keeps_the_tape() {
    let o = gradc(&["grad", &corpus("identity.tg"), "--entry", "f", "--wrt", "0", "--no-optimize"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("_stack = stack()") && text.contains("push(") && text.contains("pop("), "{text}");
}

#[test]
fn derivative_written_to_a_file_runs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("df.tg");
    let out = out.to_str().unwrap();
    let o = gradc(&["grad", &corpus("square.tg"), "--entry", "f", "--wrt", "0", "-o", out]);
    assert_eq!(o.status.code(), Some(0));
    assert!(o.stdout.is_empty());
    let r = gradc(&["run", out, "--entry", "dfdx", "--args", "3"]);
    assert_eq!(r.status.code(), Some(0));
    assert_eq!(stdout(&r).trim(), "6.0");
}

#[test]
fn run_accepts_array_literals() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("f.tg");
    std::fs::write(&f, "def f(x, k):\n    return sum(x) * k\n").unwrap();
    let r = gradc(&["run", f.to_str().unwrap(), "--entry", "f", "--args", "[[1, 2], [3, 4.5]], -2"]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(stdout(&r).trim(), "-21.0");
}

#[test]
fn check_passes_on_the_mlp() {
    let o = gradc(&["check", &corpus("mlp.tg"), "--entry", "mlp", "--wrt", "1,2,3,4", "--eps", "1e-5", "--rtol", "1e-4"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).lines().last().unwrap().starts_with("PASS"));
}

#[test]
fn check_reports_a_clipped_gradient() {
    // At x = 8 the true derivative is 16 but the inserted code clips to 10.
    let args = ["check", &corpus("clipping.tg"), "--entry", "f", "--wrt", "0", "--args", "8"];
    let o = gradc(&args);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
    let mut custom = args.to_vec();
    custom.push("--expect-custom");
    assert_eq!(gradc(&custom).status.code(), Some(0));
}

#[test]
fn forward_and_hvp_modes() {
    let fwd = gradc(&["grad", &corpus("square.tg"), "--entry", "f", "--wrt", "0", "--mode", "forward"]);
    assert_eq!(fwd.status.code(), Some(0));
    assert!(stdout(&fwd).starts_with("def df_fwd(x, tx):"), "{}", stdout(&fwd));
    let h = gradc(&["grad", &corpus("square.tg"), "--entry", "f", "--wrt", "0", "--mode", "hvp"]);
    assert_eq!(h.status.code(), Some(0));
    assert!(stdout(&h).starts_with("def hvp_f(x, v):"));
}

#[test]
fn exit_codes() {
    assert_eq!(gradc(&["grad", "missing.tg", "--entry", "f", "--wrt", "0"]).status.code(), Some(1));
    assert_eq!(gradc(&["grad", &corpus("square.tg"), "--wrt", "0"]).status.code(), Some(2));
    assert_eq!(gradc(&["frobnicate"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.tg");
    std::fs::write(&bad, "def f(x):\n    while x > 0.0:\n        break\n    return x\n").unwrap();
    let o = gradc(&["grad", bad.to_str().unwrap(), "--entry", "f", "--wrt", "0"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 3") && err.contains("R4"), "{err}");

    let syntax = dir.path().join("syntax.tg");
    std::fs::write(&syntax, "def f(x):\n    return x +\n").unwrap();
    let o = gradc(&["run", syntax.to_str().unwrap(), "--entry", "f", "--args", "1.0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
}

#[test]
fn bench_emits_csv() {
    let o = gradc(&["bench", "lattice", "--n", "2,4", "--m", "2", "--d", "3", "--mode", "persistent", "--repeats", "1"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "mode,n,m,d,seconds,bytes_allocated");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("persistent,2,2,3,"));
    assert!(lines[2].starts_with("persistent,4,2,3,"));
    let bad = gradc(&["bench", "lattice", "--mode", "sideways", "--n", "2"]);
    assert_eq!(bad.status.code(), Some(1));
}

//! Table of builtin functions: names, arities and one-line descriptions.
//!
//! The evaluator implements every entry; the validator uses the table to
//! resolve callees, and the README's kernel table is generated from it.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    /// Array kernels available to user programs.
    Kernel,
    /// Gradient and tangent support used by generated code.
    Gradient,
    /// Tape operations used by generated code.
    Tape,
    /// Everything else (printing, tuples, persistent arrays).
    Misc,
}

#[derive(Debug, Clone, Copy)]
pub struct Builtin {
    pub name: &'static str,
    pub min_args: usize,
    /// `None` means variadic.
    pub max_args: Option<usize>,
    pub group: Group,
    pub shape_rule: &'static str,
}

const fn b(
    name: &'static str,
    min_args: usize,
    max_args: Option<usize>,
    group: Group,
    shape_rule: &'static str,
) -> Builtin {
    Builtin {
        name,
        min_args,
        max_args,
        group,
        shape_rule,
    }
}

use Group::*;

pub const BUILTINS: &[Builtin] = &[
    b("add", 2, Some(2), Kernel, "broadcast(a, b); same as `a + b`"),
    b("subtract", 2, Some(2), Kernel, "broadcast(a, b); same as `a - b`"),
    b("multiply", 2, Some(2), Kernel, "broadcast(a, b); same as `a * b`"),
    b("divide", 2, Some(2), Kernel, "broadcast(a, b); same as `a / b`"),
    b("negative", 1, Some(1), Kernel, "shape of x; same as `-x`"),
    b("dot", 2, Some(2), Kernel, "contract last axis of a with first axis of b"),
    b("tanh", 1, Some(1), Kernel, "elementwise"),
    b("exp", 1, Some(1), Kernel, "elementwise"),
    b("log", 1, Some(1), Kernel, "elementwise; log(0) = -inf"),
    b("sum", 1, Some(3), Kernel, "x[, axis[, keepdims]]: all elements to scalar, or reduce one axis"),
    b("mean", 1, Some(3), Kernel, "x[, axis[, keepdims]]: like sum, divided by the reduced count"),
    b("zeros", 1, None, Kernel, "zeros(n, ...) or zeros(shape_of(x)): new array of zeros"),
    b("append", 2, Some(2), Kernel, "x with `row` appended along axis 0"),
    b("setitem", 3, Some(3), Kernel, "copy of x with x[i] = v (pure form of index assignment)"),
    b("shape_of", 1, Some(1), Kernel, "tuple of dimensions"),
    b("copy", 1, Some(1), Kernel, "value copy"),
    b("drop_last", 1, Some(1), Kernel, "x without its last row"),
    b("parray", 1, Some(1), Misc, "persistent array holding a copy of x"),
    b("dense", 1, Some(1), Misc, "dense copy of a persistent array (identity on dense)"),
    b("print", 0, None, Misc, "prints its arguments; returns None"),
    b("tuple", 0, None, Misc, "tuple of its arguments"),
    b("init_grad", 1, Some(1), Gradient, "lazy zero gradient for any x"),
    b("add_grad", 2, Some(2), Gradient, "gradient sum; a zero gradient is the identity"),
    b("unbroadcast", 2, Some(2), Gradient, "sum g over broadcast axes down to the shape of `like`"),
    b("broadcast_like", 2, Some(2), Gradient, "expand g to the shape of `like`"),
    b("sum_grad", 2, Some(4), Gradient, "g, like[, axis[, keepdims]]: adjoint of sum"),
    b("mean_grad", 2, Some(4), Gradient, "g, like[, axis[, keepdims]]: adjoint of mean"),
    b("grad_dot_lhs", 3, Some(3), Gradient, "g, a, b: gradient of dot(a, b) w.r.t. a"),
    b("grad_dot_rhs", 3, Some(3), Gradient, "g, a, b: gradient of dot(a, b) w.r.t. b"),
    b("add_at", 4, Some(4), Gradient, "acc, like, i, g: acc with g added at index i; densifies a zero acc to like's shape"),
    b("save_row", 2, Some(2), Tape, "x, i: value needed to undo `setitem(x, i, _)` (row copy, or version handle)"),
    b("restore_row", 3, Some(3), Tape, "x, i, saved: undo a `setitem` using the saved value"),
    b("stack", 0, Some(0), Tape, "handle to the evaluation's tape"),
    b("push", 3, Some(3), Tape, "push(stack, v, 'label'): push a snapshot of v"),
    b("pop", 2, Some(2), Tape, "pop(stack, 'label'): pop the top entry, checking its label"),
];

pub fn lookup(name: &str) -> Option<&'static Builtin> {
    BUILTINS.iter().find(|b| b.name == name)
}

pub fn is_builtin(name: &str) -> bool {
    lookup(name).is_some()
}

/// Builtins with an externally visible effect; the optimizer never removes
/// calls to them.
pub fn has_side_effect(name: &str) -> bool {
    matches!(name, "print" | "push" | "pop")
}

/// Builtins whose first argument may be updated in place when the result
/// is assigned back to the same variable.
pub fn updates_first_arg(name: &str) -> bool {
    matches!(
        name,
        "setitem" | "add_at" | "restore_row" | "drop_last"
    )
}

/// Markdown table of every builtin, as it appears in the README.
pub fn kernel_table() -> String {
    let mut out = String::from("| Builtin | Arguments | Group | Shape rule |\n|---|---|---|---|\n");
    for b in BUILTINS {
        let args = match b.max_args {
            Some(max) if max == b.min_args => max.to_string(),
            Some(max) => format!("{}–{max}", b.min_args),
            None => format!("{}+", b.min_args),
        };
        let group = match b.group {
            Kernel => "kernel",
            Gradient => "gradient",
            Tape => "tape",
            Misc => "misc",
        };
        out.push_str(&format!("| `{}` | {args} | {group} | {} |\n", b.name, b.shape_rule));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut names: Vec<_> = BUILTINS.iter().map(|b| b.name).collect();
        names.sort();
        let n = names.len();
        names.dedup();
        assert_eq!(n, names.len());
    }
}

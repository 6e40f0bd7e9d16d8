//! Fresh-name and tape-label generation for the transforms.

use std::collections::BTreeSet;

use crate::ast::*;
use crate::builtins::BUILTINS;

/// Hands out names that collide with nothing already in use.
#[derive(Debug, Clone, Default)]
pub struct NameGen {
    used: BTreeSet<String>,
}

impl NameGen {
    /// A generator that avoids every name in `p` (functions, parameters,
    /// variables) and every builtin.
    pub fn for_program(p: &Program) -> NameGen {
        let mut g = NameGen::default();
        for b in BUILTINS {
            g.reserve(b.name);
        }
        for f in &p.functions {
            g.reserve(&f.name);
            g.used.extend(function_names(f));
        }
        g
    }

    pub fn reserve(&mut self, name: &str) {
        self.used.insert(name.to_string());
    }

    pub fn is_used(&self, name: &str) -> bool {
        self.used.contains(name)
    }

    /// `base` if unused, otherwise `base2`, `base3`, ... The result is
    /// reserved.
    pub fn fresh(&mut self, base: &str) -> String {
        let mut candidate = base.to_string();
        let mut k = 2;
        while self.used.contains(&candidate) {
            candidate = format!("{base}{k}");
            k += 1;
        }
        self.used.insert(candidate.clone());
        candidate
    }
}

/// Deterministic, program-wide unique tape labels of the form `_1a2b3c4d`.
#[derive(Debug, Clone, Default)]
pub struct LabelGen {
    used: BTreeSet<String>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl LabelGen {
    /// A generator avoiding the labels already present in `p`.
    pub fn for_program(p: &Program) -> LabelGen {
        let mut g = LabelGen::default();
        for f in &p.functions {
            walk_stmts(&f.body, &mut |s| {
                for e in s.exprs() {
                    e.walk(&mut |x| {
                        if let Expr::Call { func, args } = x {
                            if func == "push" || func == "pop" {
                                if let Some(Expr::Str(l)) = args.last() {
                                    g.used.insert(l.clone());
                                }
                            }
                        }
                    });
                }
            });
        }
        g
    }

    /// Next label for a function; derived from the function name and a
    /// counter, so output is reproducible.
    pub fn next(&mut self, scope: &str) -> String {
        let mut counter = self.used.len() as u64;
        loop {
            let h = fnv1a(format!("{scope}:{counter}").as_bytes());
            let label = format!("_{:08x}", (h >> 32) as u32 ^ h as u32);
            if self.used.insert(label.clone()) {
                return label;
            }
            counter += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_names_avoid_collisions() {
        let p = crate::parser::parse("def f(x):\n    _bx = x\n    return _bx\n").unwrap();
        let mut g = NameGen::for_program(&p);
        assert_eq!(g.fresh("_bx"), "_bx2");
        assert_eq!(g.fresh("_bx"), "_bx3");
        assert_eq!(g.fresh("_by"), "_by");
        assert_eq!(g.fresh("dot"), "dot2");
    }

    #[test]
    fn labels_are_deterministic_and_unique() {
        let mut a = LabelGen::default();
        let mut b = LabelGen::default();
        let la: Vec<_> = (0..50).map(|_| a.next("dfdx")).collect();
        let lb: Vec<_> = (0..50).map(|_| b.next("dfdx")).collect();
        assert_eq!(la, lb);
        let set: BTreeSet<_> = la.iter().collect();
        assert_eq!(set.len(), 50);
        assert!(la.iter().all(|l| l.len() == 9 && l.starts_with('_')));
    }
}

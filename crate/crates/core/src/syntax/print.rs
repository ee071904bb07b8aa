use alloc::format;
use alloc::string::String;
use core::fmt::Write;

use super::parser::{infix_priority, is_infix};
use super::*;

/// Canonical text of a term. Parsing the output yields the same term.
pub fn print_term(t: &Term) -> String {
    let mut out = String::new();
    write_term(&mut out, t);
    out
}

fn is_plain_name(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_lowercase())
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Names that the parser would read as operators when left bare.
fn is_operator_word(s: &str) -> bool {
    s == "is" || s == "mod"
}

pub(crate) fn write_name(out: &mut String, name: &str) {
    if is_plain_name(name) && !is_operator_word(name) {
        out.push_str(name);
        return;
    }
    out.push('\'');
    for c in name.chars() {
        match c {
            '\'' => out.push_str("\\'"),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out.push('\'');
}

fn operator_priority(t: &Term) -> u32 {
    match t {
        Term::Compound(f, args) if args.len() == 2 => infix_priority(f).unwrap_or(0),
        _ => 0,
    }
}

fn write_operand(out: &mut String, t: &Term, max: u32) {
    if operator_priority(t) > max {
        out.push('(');
        write_term(out, t);
        out.push(')');
    } else {
        write_term(out, t);
    }
}

fn write_term(out: &mut String, t: &Term) {
    match t {
        Term::Int(i) => {
            let _ = write!(out, "{i}");
        }
        Term::Var(v) => out.push_str(v),
        Term::Atom(a) if &**a == NIL => out.push_str(NIL),
        Term::Atom(a) => write_name(out, a),
        Term::Compound(f, args) if &**f == CONS && args.len() == 2 => {
            let (items, tail) = t.list_parts().expect("cons cell");
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_term(out, item);
            }
            if !tail.is_nil() {
                out.push('|');
                write_term(out, tail);
            }
            out.push(']');
        }
        Term::Compound(f, args) if args.len() == 2 && is_infix(f) => {
            let p = infix_priority(f).expect("infix");
            let left_max = if p == 700 { p - 1 } else { p };
            write_operand(out, &args[0], left_max);
            out.push(' ');
            out.push_str(f);
            out.push(' ');
            write_operand(out, &args[1], p - 1);
        }
        Term::Compound(f, args) => {
            write_name(out, f);
            out.push('(');
            for (i, a) in args.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_term(out, a);
            }
            out.push(')');
        }
    }
}

fn write_label(out: &mut String, l: &ProbLabel) {
    match l {
        ProbLabel::Fixed(p) => {
            let _ = write!(out, "{p:?}");
        }
        ProbLabel::Learnable { init, .. } => {
            let _ = write!(out, "t({init:?})");
        }
    }
}

fn write_body(out: &mut String, body: &[Literal]) {
    if body.is_empty() {
        return;
    }
    out.push_str(" :- ");
    for (i, l) in body.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        if !l.positive {
            out.push_str("\\+");
        }
        write_term(out, &l.atom.to_term());
    }
}

fn write_list(out: &mut String, items: &[Term]) {
    write_term(out, &Term::list(items.to_vec()));
}

/// Source text of a whole program, one clause per line.
pub(crate) fn print_program(p: &Program) -> String {
    let mut out = String::new();
    for n in &p.neural {
        out.push_str("nn(");
        write_name(&mut out, &n.model);
        out.push(',');
        write_list(&mut out, &n.inputs);
        if let (Some(o), Some(d)) = (&n.output, &n.domain) {
            out.push(',');
            write_term(&mut out, o);
            out.push(',');
            write_list(&mut out, d);
        }
        out.push_str(") :: ");
        write_term(&mut out, &n.atom.to_term());
        out.push_str(".\n");
    }
    for f in &p.facts {
        write_label(&mut out, &f.label);
        out.push_str(" :: ");
        write_term(&mut out, &f.atom.to_term());
        out.push_str(".\n");
    }
    for ad in &p.ads {
        for (i, (l, a)) in ad.heads.iter().enumerate() {
            if i > 0 {
                out.push_str(" ; ");
            }
            write_label(&mut out, l);
            out.push_str(" :: ");
            write_term(&mut out, &a.to_term());
        }
        write_body(&mut out, &ad.body);
        out.push_str(".\n");
    }
    for r in &p.rules {
        write_term(&mut out, &r.head.to_term());
        write_body(&mut out, &r.body);
        out.push_str(".\n");
    }
    for q in &p.queries {
        out.push_str(&format!("query({}).\n", print_term(&q.to_term())));
    }
    for e in &p.evidence {
        out.push_str(&format!(
            "evidence({}, {}).\n",
            print_term(&e.atom.to_term()),
            e.value
        ));
    }
    out
}

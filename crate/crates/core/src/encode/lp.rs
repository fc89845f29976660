//! LP-style text format with bracketed quadratic terms. See `docs/format.md`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{Census, Constraint, Expression, MiqcpModel, Product, Sense, VarId, VarKind};
use crate::error::{Error, Result};
use crate::interval::Interval;

const LINE_WIDTH: usize = 200;
const HEADER: &str = "\\ poisoncert model";

/// Shortest text that parses back to the same `f64`.
fn num(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:?}")
    }
}

fn coef_tokens(out: &mut Vec<String>, c: f64, first: bool) {
    let mag = c.abs();
    if c < 0.0 {
        out.push("-".into());
    } else if !first {
        out.push("+".into());
    }
    if mag != 1.0 {
        out.push(num(mag));
    }
}

/// Tokens of `Σ linear + [ Σ quadratic ]`, grouped so a line never starts
/// with a bare name.
fn expr_tokens(
    m: &MiqcpModel,
    constant: f64,
    linear: &[(f64, VarId)],
    quadratic: &[(f64, VarId, VarId)],
    objective: bool,
) -> Vec<String> {
    let mut groups: Vec<String> = Vec::new();
    let name = |v: &VarId| m.variables[v.0].name.as_str();
    if constant != 0.0 {
        groups.push(num(constant));
    }
    for (c, v) in linear {
        let mut t = Vec::new();
        coef_tokens(&mut t, *c, groups.is_empty());
        t.push(name(v).to_string());
        groups.push(t.join(" "));
    }
    if !quadratic.is_empty() {
        groups.push(if groups.is_empty() { "[".into() } else { "+ [".into() });
        for (k, (c, a, b)) in quadratic.iter().enumerate() {
            let c = if objective { 2.0 * c } else { *c };
            let mut t = Vec::new();
            coef_tokens(&mut t, c, k == 0);
            if a == b {
                t.push(format!("{} ^ 2", name(a)));
            } else {
                t.push(format!("{} * {}", name(a), name(b)));
            }
            groups.push(t.join(" "));
        }
        groups.push(if objective { "] / 2".into() } else { "]".into() });
    }
    if groups.is_empty() {
        groups.push("0".into());
    }
    groups
}

fn wrap(out: &mut String, head: &str, groups: &[String]) {
    let mut line = String::from(head);
    for g in groups {
        if line.len() + 1 + g.len() > LINE_WIDTH && line.trim().len() > head.trim().len() {
            out.push_str(&line);
            out.push('\n');
            line = String::from("  ");
        }
        line.push(' ');
        line.push_str(g);
    }
    out.push_str(&line);
    out.push('\n');
}

pub fn emit_to_string(m: &MiqcpModel) -> String {
    let mut out = String::new();
    out.push_str(HEADER);
    out.push('\n');
    for (k, v) in &m.meta {
        out.push_str(&format!("\\ meta {k} = {v}\n"));
    }
    for line in Census::of(m).comment_lines() {
        out.push_str(&format!("\\ {line}\n"));
    }
    for p in &m.products {
        let n = |v: VarId| m.variables[v.0].name.as_str();
        out.push_str(&format!("\\ product {} = {} * {}\n", n(p.var), n(p.left), n(p.right)));
    }
    let o = &m.objective;
    if m.is_empty() && o.constant == 0.0 && o.linear.is_empty() && o.quadratic.is_empty() {
        return out;
    }
    out.push_str("Maximize\n");
    wrap(&mut out, " obj:", &expr_tokens(m, o.constant, &o.linear, &o.quadratic, true));
    out.push_str("Subject To\n");
    for c in &m.constraints {
        let mut g = expr_tokens(m, 0.0, &c.linear, &c.quadratic, false);
        g.push(format!("{} {}", c.sense.symbol(), num(c.rhs)));
        wrap(&mut out, &format!(" {}:", c.name), &g);
    }
    out.push_str("Bounds\n");
    for v in &m.variables {
        let b = v.bounds;
        let line = if b.lo == f64::NEG_INFINITY && b.hi == f64::INFINITY {
            format!(" {} free\n", v.name)
        } else if b.lo == b.hi {
            format!(" {} = {}\n", v.name, num(b.lo))
        } else {
            format!(" {} <= {} <= {}\n", num(b.lo), v.name, num(b.hi))
        };
        out.push_str(&line);
    }
    out.push_str("Binaries\n");
    let bins: Vec<String> = m
        .variables
        .iter()
        .filter(|v| v.kind == VarKind::Binary)
        .map(|v| v.name.clone())
        .collect();
    if !bins.is_empty() {
        let mut line = String::new();
        for b in bins {
            if !line.is_empty() && line.len() + 1 + b.len() > LINE_WIDTH {
                out.push_str(&line);
                out.push('\n');
                line.clear();
            }
            line.push(' ');
            line.push_str(&b);
        }
        out.push_str(&line);
        out.push('\n');
    }
    out.push_str("End\n");
    out
}

pub fn emit(m: &MiqcpModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, emit_to_string(m))?;
    Ok(())
}

pub fn parse(path: impl AsRef<Path>) -> Result<MiqcpModel> {
    parse_str(&fs::read_to_string(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Section {
    Header,
    Objective,
    Constraints,
    Bounds,
    Binaries,
    End,
}

fn syntax(line: usize, message: impl Into<String>) -> Error {
    Error::ModelSyntax {
        line,
        message: message.into(),
    }
}

fn section_of(line: &str) -> Option<Section> {
    match line.trim().to_ascii_lowercase().as_str() {
        "maximize" | "maximise" | "max" => Some(Section::Objective),
        "subject to" | "st" | "s.t." | "such that" => Some(Section::Constraints),
        "bounds" => Some(Section::Bounds),
        "binaries" | "binary" | "bin" => Some(Section::Binaries),
        "end" => Some(Section::End),
        _ => None,
    }
}

fn is_number(tok: &str) -> bool {
    let t = tok.strip_prefix(['+', '-']).unwrap_or(tok);
    t.starts_with(|c: char| c.is_ascii_digit() || c == '.')
}

fn bound_number(tok: &str, line: usize) -> Result<f64> {
    match tok.to_ascii_lowercase().as_str() {
        "inf" | "+inf" | "infinity" | "+infinity" => Ok(f64::INFINITY),
        "-inf" | "-infinity" => Ok(f64::NEG_INFINITY),
        _ if is_number(tok) => tok.parse().map_err(|_| syntax(line, format!("bad number {tok:?}"))),
        _ => Err(syntax(line, format!("expected a number, found {tok:?}"))),
    }
}

fn number(tok: &str, line: usize) -> Result<f64> {
    if !is_number(tok) {
        return Err(syntax(line, format!("expected a number, found {tok:?}")));
    }
    tok.parse().map_err(|_| syntax(line, format!("bad number {tok:?}")))
}

fn sense_of(tok: &str) -> Option<Sense> {
    match tok {
        "<=" | "=<" | "<" => Some(Sense::Le),
        ">=" | "=>" | ">" => Some(Sense::Ge),
        "=" => Some(Sense::Eq),
        _ => None,
    }
}

#[derive(Default)]
struct RawExpr {
    constant: f64,
    linear: Vec<(f64, String)>,
    quadratic: Vec<(f64, String, String)>,
}

/// Parses `tokens` up to an optional sense; returns the expression and the
/// remaining tokens.
fn parse_expr<'a>(tokens: &'a [&'a str], line: usize) -> Result<(RawExpr, &'a [&'a str])> {
    let mut e = RawExpr::default();
    let mut i = 0;
    let mut sign = 1.0;
    let mut coef: Option<f64> = None;
    while i < tokens.len() {
        let t = tokens[i];
        if sense_of(t).is_some() {
            break;
        }
        match t {
            "+" => sign = 1.0,
            "-" => sign = -sign,
            "[" => {
                let close = tokens[i..]
                    .iter()
                    .position(|&x| x == "]")
                    .ok_or_else(|| syntax(line, "unterminated '['"))?
                    + i;
                let mut quad = parse_quadratic(&tokens[i + 1..close], line)?;
                let mut next = close + 1;
                if tokens.get(next) == Some(&"/") {
                    let d = number(tokens.get(next + 1).ok_or_else(|| syntax(line, "missing divisor"))?, line)?;
                    for q in &mut quad {
                        q.0 /= d;
                    }
                    next += 2;
                }
                for (c, a, b) in quad {
                    e.quadratic.push((sign * c, a, b));
                }
                sign = 1.0;
                i = next;
                continue;
            }
            _ if is_number(t) => {
                let v = number(t, line)?;
                let named = tokens
                    .get(i + 1)
                    .is_some_and(|n| !is_number(n) && sense_of(n).is_none() && !["+", "-", "[", "]"].contains(n));
                if named {
                    coef = Some(v);
                } else {
                    e.constant += sign * v;
                    sign = 1.0;
                }
            }
            name => {
                e.linear.push((sign * coef.take().unwrap_or(1.0), name.to_string()));
                sign = 1.0;
            }
        }
        i += 1;
    }
    Ok((e, &tokens[i..]))
}

fn parse_quadratic(tokens: &[&str], line: usize) -> Result<Vec<(f64, String, String)>> {
    let mut out = Vec::new();
    let mut i = 0;
    let mut sign = 1.0;
    while i < tokens.len() {
        match tokens[i] {
            "+" => {
                sign = 1.0;
                i += 1;
            }
            "-" => {
                sign = -sign;
                i += 1;
            }
            _ => {
                let mut c = 1.0;
                if is_number(tokens[i]) {
                    c = number(tokens[i], line)?;
                    i += 1;
                }
                let a = *tokens.get(i).ok_or_else(|| syntax(line, "dangling coefficient"))?;
                match (tokens.get(i + 1), tokens.get(i + 2)) {
                    (Some(&"*"), Some(b)) => {
                        out.push((sign * c, a.to_string(), b.to_string()));
                        i += 3;
                    }
                    (Some(&"^"), Some(&"2")) => {
                        out.push((sign * c, a.to_string(), a.to_string()));
                        i += 3;
                    }
                    _ => return Err(syntax(line, format!("malformed quadratic term near {a:?}"))),
                }
                sign = 1.0;
            }
        }
    }
    Ok(out)
}

struct Pending {
    line: usize,
    text: String,
}

pub fn parse_str(text: &str) -> Result<MiqcpModel> {
    let mut section = Section::Header;
    let mut meta = std::collections::BTreeMap::new();
    let mut products_raw: Vec<(usize, String, String, String)> = Vec::new();
    let mut objective: Option<Pending> = None;
    let mut constraints: Vec<Pending> = Vec::new();
    let mut bounds: Vec<(usize, String, Interval)> = Vec::new();
    let mut binaries: Vec<String> = Vec::new();
    let mut current: Option<Pending> = None;
    let flush = |cur: &mut Option<Pending>, sec: Section, obj: &mut Option<Pending>, cons: &mut Vec<Pending>| {
        if let Some(p) = cur.take() {
            match sec {
                Section::Objective => *obj = Some(p),
                _ => cons.push(p),
            }
        }
    };

    for (ln, raw) in text.lines().enumerate() {
        let ln = ln + 1;
        let line = raw.trim_end();
        if line.trim().is_empty() {
            continue;
        }
        if let Some(c) = line.trim_start().strip_prefix('\\') {
            let c = c.trim();
            if let Some(rest) = c.strip_prefix("meta ") {
                let (k, v) = rest.split_once(" = ").ok_or_else(|| syntax(ln, "meta line without ' = '"))?;
                meta.insert(k.trim().to_string(), v.trim().to_string());
            } else if let Some(rest) = c.strip_prefix("product ") {
                let t: Vec<&str> = rest.split_whitespace().collect();
                match t.as_slice() {
                    [p, "=", a, "*", b] => products_raw.push((ln, p.to_string(), a.to_string(), b.to_string())),
                    _ => return Err(syntax(ln, "malformed product line")),
                }
            }
            continue;
        }
        let indented = raw.starts_with(char::is_whitespace);
        if let Some(s) = section_of(line).filter(|_| !indented) {
            flush(&mut current, section, &mut objective, &mut constraints);
            if s == Section::Objective && section != Section::Header {
                return Err(syntax(ln, "objective section out of order"));
            }
            section = s;
            continue;
        }
        match section {
            Section::Header => return Err(syntax(ln, "content before the objective section")),
            Section::End => return Err(syntax(ln, "content after End")),
            Section::Objective | Section::Constraints => {
                let first = line.split_whitespace().next().unwrap_or("");
                if first.ends_with(':') {
                    flush(&mut current, section, &mut objective, &mut constraints);
                    current = Some(Pending {
                        line: ln,
                        text: line.trim().to_string(),
                    });
                } else {
                    let p = current.as_mut().ok_or_else(|| syntax(ln, "continuation without a statement"))?;
                    p.text.push(' ');
                    p.text.push_str(line.trim());
                }
            }
            Section::Bounds => {
                let t: Vec<&str> = line.split_whitespace().collect();
                let (name, b) = match t.as_slice() {
                    [lo, "<=", name, "<=", hi] => (*name, (bound_number(lo, ln)?, bound_number(hi, ln)?)),
                    [name, "free"] => (*name, (f64::NEG_INFINITY, f64::INFINITY)),
                    [name, "=", v] => {
                        let v = bound_number(v, ln)?;
                        (*name, (v, v))
                    }
                    [name, ">=", v] => (*name, (bound_number(v, ln)?, f64::INFINITY)),
                    [name, "<=", v] => (*name, (0.0, bound_number(v, ln)?)),
                    _ => return Err(syntax(ln, "malformed bound")),
                };
                let iv = Interval::new(b.0, b.1).map_err(|e| syntax(ln, e.to_string()))?;
                bounds.push((ln, name.to_string(), iv));
            }
            Section::Binaries => binaries.extend(line.split_whitespace().map(str::to_string)),
        }
    }
    flush(&mut current, section, &mut objective, &mut constraints);
    if !matches!(section, Section::End | Section::Header) {
        return Err(syntax(text.lines().count(), "missing End"));
    }

    // variables in Bounds order, then any others in order of appearance
    let mut m = MiqcpModel::new();
    let bin_set: std::collections::HashSet<&str> = binaries.iter().map(String::as_str).collect();
    let mut seen: HashMap<String, VarId> = HashMap::new();
    for (ln, name, iv) in &bounds {
        if seen.contains_key(name) {
            return Err(syntax(*ln, format!("second bound for {name}")));
        }
        let kind = if bin_set.contains(name.as_str()) { VarKind::Binary } else { VarKind::Continuous };
        let id = m.add_var(name.clone(), kind, *iv).map_err(|e| syntax(*ln, e.to_string()))?;
        seen.insert(name.clone(), id);
    }
    let mut declare = |m: &mut MiqcpModel, name: &str, ln: usize| -> Result<VarId> {
        if let Some(&id) = seen.get(name) {
            return Ok(id);
        }
        let (kind, iv) = if bin_set.contains(name) {
            (VarKind::Binary, Interval::UNIT)
        } else {
            (VarKind::Continuous, Interval { lo: 0.0, hi: f64::INFINITY })
        };
        let id = m.add_var(name, kind, iv).map_err(|e| syntax(ln, e.to_string()))?;
        seen.insert(name.to_string(), id);
        Ok(id)
    };

    let resolve = |m: &mut MiqcpModel,
                   e: RawExpr,
                   ln: usize,
                   declare: &mut dyn FnMut(&mut MiqcpModel, &str, usize) -> Result<VarId>|
     -> Result<Expression> {
        let mut out = Expression {
            constant: e.constant,
            ..Expression::default()
        };
        for (c, n) in e.linear {
            out.linear.push((c, declare(m, &n, ln)?));
        }
        for (c, a, b) in e.quadratic {
            let a = declare(m, &a, ln)?;
            let b = declare(m, &b, ln)?;
            out.quadratic.push((c, a, b));
        }
        Ok(out)
    };

    if let Some(p) = objective {
        let toks: Vec<&str> = p.text.split_whitespace().collect();
        let (e, rest) = parse_expr(&toks[1..], p.line)?;
        if !rest.is_empty() {
            return Err(syntax(p.line, "relational operator in objective"));
        }
        m.objective = resolve(&mut m, e, p.line, &mut declare)?;
    }
    for p in constraints {
        let toks: Vec<&str> = p.text.split_whitespace().collect();
        let name = toks[0].trim_end_matches(':').to_string();
        let (e, rest) = parse_expr(&toks[1..], p.line)?;
        let (sense, rhs) = match rest {
            [s, v] => (sense_of(s).expect("stopped at a sense"), number(v, p.line)?),
            [s, "-", v] => (sense_of(s).expect("stopped at a sense"), -number(v, p.line)?),
            _ => return Err(syntax(p.line, "expected '<sense> <number>' at the end of the constraint")),
        };
        let e = resolve(&mut m, e, p.line, &mut declare)?;
        m.add_constraint(Constraint {
            name,
            linear: e.linear,
            quadratic: e.quadratic,
            sense,
            rhs: rhs - e.constant,
        })
        .map_err(|err| syntax(p.line, err.to_string()))?;
    }
    for name in &binaries {
        declare(&mut m, name, 0)?;
    }
    for (ln, p, a, b) in products_raw {
        let get = |n: &str| m.var(n).ok_or_else(|| syntax(ln, format!("product refers to unknown variable {n}")));
        m.products.push(Product {
            var: get(&p)?,
            left: get(&a)?,
            right: get(&b)?,
        });
    }
    m.meta = meta;
    m.rebuild_index();
    Ok(m)
}

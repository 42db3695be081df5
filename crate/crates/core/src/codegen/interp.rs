//! Integer arithmetic interpreter for emitted index expressions, plus a small
//! extractor that pulls helper bodies back out of generated source.

use std::collections::HashMap;

use super::{CodegenError, Dialect};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(i64),
    Ident(String),
    Op(char),
}

fn tokenize(src: &str) -> Result<Vec<Tok>, CodegenError> {
    let mut out = Vec::new();
    let chars: Vec<char> = src.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            let text: String = chars[start..i].iter().collect();
            out.push(Tok::Num(text.parse().map_err(|_| interp_err(src, "bad literal"))?));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Tok::Ident(chars[start..i].iter().collect()));
        } else if "+-*/%(),".contains(c) {
            out.push(Tok::Op(c));
            i += 1;
        } else {
            return Err(interp_err(src, &format!("unexpected character `{c}`")));
        }
    }
    Ok(out)
}

fn interp_err(src: &str, msg: &str) -> CodegenError {
    CodegenError::Interp(format!("{msg} in `{src}`"))
}

struct Parser<'a> {
    toks: Vec<Tok>,
    pos: usize,
    env: &'a HashMap<String, i64>,
    src: &'a str,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn expect(&mut self, c: char) -> Result<(), CodegenError> {
        match self.toks.get(self.pos) {
            Some(Tok::Op(x)) if *x == c => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(interp_err(self.src, &format!("expected `{c}`"))),
        }
    }

    fn expr(&mut self) -> Result<i64, CodegenError> {
        let mut v = self.term()?;
        while let Some(Tok::Op(c @ ('+' | '-'))) = self.peek().cloned() {
            self.pos += 1;
            let r = self.term()?;
            v = if c == '+' { v + r } else { v - r };
        }
        Ok(v)
    }

    fn term(&mut self) -> Result<i64, CodegenError> {
        let mut v = self.atom()?;
        while let Some(Tok::Op(c @ ('*' | '/' | '%'))) = self.peek().cloned() {
            self.pos += 1;
            let r = self.atom()?;
            v = match c {
                '*' => v * r,
                _ if r == 0 => return Err(interp_err(self.src, "division by zero")),
                '/' => v / r,
                _ => v % r,
            };
        }
        Ok(v)
    }

    fn atom(&mut self) -> Result<i64, CodegenError> {
        match self.toks.get(self.pos).cloned() {
            Some(Tok::Num(n)) => {
                self.pos += 1;
                Ok(n)
            }
            Some(Tok::Op('-')) => {
                self.pos += 1;
                Ok(-self.atom()?)
            }
            Some(Tok::Op('(')) => {
                self.pos += 1;
                let v = self.expr()?;
                self.expect(')')?;
                Ok(v)
            }
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                if let Some(Tok::Op('(')) = self.peek() {
                    self.pos += 1;
                    let a = self.expr()?;
                    self.expect(',')?;
                    let b = self.expr()?;
                    self.expect(')')?;
                    return match name.as_str() {
                        "min" => Ok(a.min(b)),
                        "max" => Ok(a.max(b)),
                        _ => Err(interp_err(self.src, &format!("unknown function `{name}`"))),
                    };
                }
                self.env
                    .get(&name)
                    .copied()
                    .ok_or_else(|| interp_err(self.src, &format!("unbound name `{name}`")))
            }
            _ => Err(interp_err(self.src, "unexpected end of expression")),
        }
    }
}

/// Evaluates an integer expression over `env` with C semantics for `/` and `%`
/// on non-negative operands.
pub fn eval(src: &str, env: &HashMap<String, i64>) -> Result<i64, CodegenError> {
    let mut p = Parser {
        toks: tokenize(src)?,
        pos: 0,
        env,
        src,
    };
    let v = p.expr()?;
    if p.pos != p.toks.len() {
        return Err(interp_err(src, "trailing tokens"));
    }
    Ok(v)
}

/// A helper function recovered from emitted source.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedHelper {
    pub params: Vec<String>,
    pub consts: Vec<(String, i64)>,
    /// Components of the returned value.
    pub result: Vec<String>,
}

impl ExtractedHelper {
    /// Evaluates every result component with the given argument values.
    pub fn call(&self, args: &[i64]) -> Result<Vec<i64>, CodegenError> {
        if args.len() != self.params.len() {
            return Err(CodegenError::Interp(format!("expected {} arguments, got {}", self.params.len(), args.len())));
        }
        let mut env: HashMap<String, i64> = self.params.iter().cloned().zip(args.iter().copied()).collect();
        for (k, v) in &self.consts {
            env.insert(k.clone(), *v);
        }
        self.result.iter().map(|e| eval(e, &env)).collect()
    }
}

fn split_top_level(s: &str) -> Vec<String> {
    let mut parts = Vec::new();
    let mut depth = 0;
    let mut cur = String::new();
    for ch in s.chars() {
        match ch {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth == 0 => {
                parts.push(cur.trim().to_string());
                cur.clear();
                continue;
            }
            _ => {}
        }
        cur.push(ch);
    }
    if !cur.trim().is_empty() {
        parts.push(cur.trim().to_string());
    }
    parts
}

/// Finds the function named `name` in `source` and recovers its integer
/// parameters, constant declarations and returned components.
pub fn extract_helper(source: &str, name: &str, dialect: Dialect) -> Result<ExtractedHelper, CodegenError> {
    let missing = || CodegenError::Interp(format!("helper `{name}` not found"));
    let header_prefix = match dialect {
        Dialect::CStyleCompute => format!(" {name}("),
        Dialect::WgslStyle => format!("fn {name}("),
    };
    let lines: Vec<&str> = source.lines().collect();
    let start = lines.iter().position(|l| l.contains(&header_prefix) && l.trim_end().ends_with('{')).ok_or_else(missing)?;
    let header = lines[start];
    let open = header.find(&header_prefix).unwrap() + header_prefix.len();
    let close = open + header[open..].find(')').ok_or_else(missing)?;
    let params = split_top_level(&header[open..close])
        .into_iter()
        .map(|p| match dialect {
            Dialect::CStyleCompute => p.rsplit(' ').next().unwrap_or("").to_string(),
            Dialect::WgslStyle => p.split(':').next().unwrap_or("").trim().to_string(),
        })
        .collect();
    let mut consts = Vec::new();
    let mut result = None;
    for line in &lines[start + 1..] {
        let t = line.trim();
        if t == "}" {
            break;
        }
        let decl = match dialect {
            Dialect::CStyleCompute => t.strip_prefix("const int "),
            Dialect::WgslStyle => t.strip_prefix("let ").map(|r| r.trim_start()),
        };
        if let Some(rest) = decl {
            let (lhs, rhs) = rest.split_once('=').ok_or_else(missing)?;
            let name = lhs.split(':').next().unwrap().trim().to_string();
            let value = rhs.trim().trim_end_matches(';').trim();
            let v = value.parse().map_err(|_| CodegenError::Interp(format!("constant `{name}` is not a literal")))?;
            consts.push((name, v));
        } else if let Some(ret) = t.strip_prefix("return ") {
            let ret = ret.trim_end_matches(';').trim();
            let inner = ["(int2)(", "(int4)(", "vec2<i32>(", "vec3<i32>(", "vec4<i32>("]
                .iter()
                .find_map(|p| ret.strip_prefix(p).and_then(|r| r.strip_suffix(')')));
            result = Some(match inner {
                Some(args) => split_top_level(args),
                None => vec![ret.to_string()],
            });
        }
    }
    Ok(ExtractedHelper {
        params,
        consts,
        result: result.ok_or_else(missing)?,
    })
}

//! Parser for the `.g` grammar file format.
//!
//! One rule per `name: expansion` line, continuation lines indented.
//! Expansion operators, loosest to tightest: `|` alternation, juxtaposition,
//! postfix `?` `*` `+`. Parentheses group. Terminals are double-quoted
//! strings (escapes `\"` `\\` `\n` `\t`) and inclusive byte ranges
//! `"a".."z"`. Line comments start with `//`.

use std::collections::HashMap;

use super::{Grammar, GrammarError, GrammarNode, RuleId};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Name(String),
    Str(Vec<u8>),
    Colon,
    Pipe,
    Question,
    Star,
    Plus,
    LParen,
    RParen,
    DotDot,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    col: usize,
}

fn err(line: usize, col: usize, message: impl Into<String>) -> GrammarError {
    GrammarError::Syntax {
        line,
        col,
        message: message.into(),
    }
}

struct Lexer<'a> {
    bytes: &'a [u8],
    pos: usize,
    line: usize,
    col: usize,
}

impl<'a> Lexer<'a> {
    fn new(source: &'a str) -> Self {
        Lexer {
            bytes: source.as_bytes(),
            pos: 0,
            line: 1,
            col: 1,
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn peek2(&self) -> Option<u8> {
        self.bytes.get(self.pos + 1).copied()
    }

    fn bump(&mut self) -> Option<u8> {
        let b = self.peek()?;
        self.pos += 1;
        if b == b'\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(b)
    }

    fn lex(mut self) -> Result<Vec<Token>, GrammarError> {
        let mut out = Vec::new();
        loop {
            // Skip whitespace and comments.
            loop {
                match self.peek() {
                    Some(b' ') | Some(b'\t') | Some(b'\r') | Some(b'\n') => {
                        self.bump();
                    }
                    Some(b'/') if self.peek2() == Some(b'/') => {
                        while let Some(b) = self.peek() {
                            if b == b'\n' {
                                break;
                            }
                            self.bump();
                        }
                    }
                    _ => break,
                }
            }
            let (line, col) = (self.line, self.col);
            let Some(b) = self.peek() else { break };
            let tok = match b {
                b':' => {
                    self.bump();
                    Tok::Colon
                }
                b'|' => {
                    self.bump();
                    Tok::Pipe
                }
                b'?' => {
                    self.bump();
                    Tok::Question
                }
                b'*' => {
                    self.bump();
                    Tok::Star
                }
                b'+' => {
                    self.bump();
                    Tok::Plus
                }
                b'(' => {
                    self.bump();
                    Tok::LParen
                }
                b')' => {
                    self.bump();
                    Tok::RParen
                }
                b'.' => {
                    if self.peek2() == Some(b'.') {
                        self.bump();
                        self.bump();
                        Tok::DotDot
                    } else {
                        return Err(err(line, col, "expected `..`"));
                    }
                }
                b'"' => Tok::Str(self.lex_string()?),
                b'_' | b'a'..=b'z' | b'A'..=b'Z' => {
                    let start = self.pos;
                    while let Some(c) = self.peek() {
                        if c == b'_' || c.is_ascii_alphanumeric() {
                            self.bump();
                        } else {
                            break;
                        }
                    }
                    let name = std::str::from_utf8(&self.bytes[start..self.pos])
                        .expect("identifier bytes are ascii")
                        .to_string();
                    Tok::Name(name)
                }
                other => {
                    return Err(err(
                        line,
                        col,
                        format!("unexpected character `{}`", other as char),
                    ))
                }
            };
            out.push(Token { tok, line, col });
        }
        Ok(out)
    }

    fn lex_string(&mut self) -> Result<Vec<u8>, GrammarError> {
        let (line, col) = (self.line, self.col);
        self.bump(); // opening quote
        let mut bytes = Vec::new();
        loop {
            match self.peek() {
                None | Some(b'\n') => return Err(err(line, col, "unterminated string literal")),
                Some(b'"') => {
                    self.bump();
                    return Ok(bytes);
                }
                Some(b'\\') => {
                    let (eline, ecol) = (self.line, self.col);
                    self.bump();
                    match self.bump() {
                        Some(b'"') => bytes.push(b'"'),
                        Some(b'\\') => bytes.push(b'\\'),
                        Some(b'n') => bytes.push(b'\n'),
                        Some(b't') => bytes.push(b'\t'),
                        other => {
                            let shown = other.map(|c| (c as char).to_string());
                            return Err(err(
                                eline,
                                ecol,
                                format!(
                                    "invalid escape `\\{}`",
                                    shown.as_deref().unwrap_or("<eof>")
                                ),
                            ));
                        }
                    }
                }
                Some(_) => {
                    bytes.push(self.bump().unwrap());
                }
            }
        }
    }
}

/// Sugared expansion tree as written in the file.
#[derive(Debug, Clone)]
enum Sugar {
    Alt(Vec<Sugar>),
    Seq(Vec<Sugar>),
    Opt(Box<Sugar>),
    Star(Box<Sugar>),
    Plus(Box<Sugar>),
    Literal(Vec<u8>),
    Range(u8, u8),
    Ref(String, usize, usize),
}

struct ExpParser<'a> {
    toks: &'a [Token],
    pos: usize,
    end_line: usize,
    end_col: usize,
}

impl<'a> ExpParser<'a> {
    fn peek(&self) -> Option<&Token> {
        self.toks.get(self.pos)
    }

    fn here(&self) -> (usize, usize) {
        self.peek()
            .map(|t| (t.line, t.col))
            .unwrap_or((self.end_line, self.end_col))
    }

    fn parse_alt(&mut self) -> Result<Sugar, GrammarError> {
        let mut alts = vec![self.parse_seq()?];
        while matches!(self.peek().map(|t| &t.tok), Some(Tok::Pipe)) {
            self.pos += 1;
            alts.push(self.parse_seq()?);
        }
        Ok(if alts.len() == 1 {
            alts.pop().unwrap()
        } else {
            Sugar::Alt(alts)
        })
    }

    fn parse_seq(&mut self) -> Result<Sugar, GrammarError> {
        let mut items = Vec::new();
        while let Some(t) = self.peek() {
            match t.tok {
                Tok::Pipe | Tok::RParen => break,
                _ => items.push(self.parse_postfix()?),
            }
        }
        if items.is_empty() {
            let (line, col) = self.here();
            return Err(err(line, col, "expected expansion"));
        }
        Ok(if items.len() == 1 {
            items.pop().unwrap()
        } else {
            Sugar::Seq(items)
        })
    }

    fn parse_postfix(&mut self) -> Result<Sugar, GrammarError> {
        let mut node = self.parse_primary()?;
        while let Some(t) = self.peek() {
            node = match t.tok {
                Tok::Question => Sugar::Opt(Box::new(node)),
                Tok::Star => Sugar::Star(Box::new(node)),
                Tok::Plus => Sugar::Plus(Box::new(node)),
                _ => break,
            };
            self.pos += 1;
        }
        Ok(node)
    }

    fn parse_primary(&mut self) -> Result<Sugar, GrammarError> {
        let (line, col) = self.here();
        let Some(t) = self.peek() else {
            return Err(err(line, col, "expected expansion"));
        };
        let t = t.clone();
        match t.tok {
            Tok::Str(bytes) => {
                self.pos += 1;
                if matches!(self.peek().map(|t| &t.tok), Some(Tok::DotDot)) {
                    self.pos += 1;
                    let (hline, hcol) = self.here();
                    let Some(Token {
                        tok: Tok::Str(hi), ..
                    }) = self.peek().cloned()
                    else {
                        return Err(err(hline, hcol, "expected string after `..`"));
                    };
                    self.pos += 1;
                    if bytes.len() != 1 || hi.len() != 1 {
                        return Err(err(
                            t.line,
                            t.col,
                            "range endpoints must be single-byte strings",
                        ));
                    }
                    if bytes[0] > hi[0] {
                        return Err(err(t.line, t.col, "range low endpoint exceeds high"));
                    }
                    Ok(Sugar::Range(bytes[0], hi[0]))
                } else {
                    Ok(Sugar::Literal(bytes))
                }
            }
            Tok::Name(name) => {
                self.pos += 1;
                Ok(Sugar::Ref(name, t.line, t.col))
            }
            Tok::LParen => {
                self.pos += 1;
                let inner = self.parse_alt()?;
                match self.peek() {
                    Some(tok) if tok.tok == Tok::RParen => {
                        self.pos += 1;
                        Ok(inner)
                    }
                    _ => {
                        let (l, c) = self.here();
                        Err(err(l, c, "expected `)`"))
                    }
                }
            }
            _ => Err(err(t.line, t.col, "expected terminal, rule name, or `(`")),
        }
    }
}

/// Accumulates rules during desugaring; fresh rules are appended as they
/// are minted so ids stay dense.
struct Builder {
    names: Vec<String>,
    bodies: Vec<Option<GrammarNode>>,
    by_name: HashMap<String, RuleId>,
    rep_counter: usize,
    grp_counter: usize,
}

impl Builder {
    fn fresh(&mut self, prefix: &str) -> RuleId {
        let counter = if prefix == "__rep" {
            &mut self.rep_counter
        } else {
            &mut self.grp_counter
        };
        loop {
            let name = format!("{prefix}{}", *counter);
            *counter += 1;
            if !self.by_name.contains_key(&name) {
                let id = RuleId(self.names.len() as u32);
                self.by_name.insert(name.clone(), id);
                self.names.push(name);
                self.bodies.push(None);
                return id;
            }
        }
    }

    fn resolve(&self, name: &str) -> Option<RuleId> {
        self.by_name.get(name).copied()
    }
}

/// Normalized-node constructors keeping the shape invariants: joins hold
/// only atoms, selects never nest.
fn mk_join(parts: Vec<GrammarNode>, builder: &mut Builder) -> GrammarNode {
    let mut flat = Vec::new();
    for part in parts {
        match part {
            GrammarNode::Epsilon => {}
            GrammarNode::Join(children) => flat.extend(children),
            GrammarNode::Select(children) => {
                // A choice in sequence position becomes a fresh rule so the
                // flattened alternatives stay one level deep.
                let id = builder.fresh("__grp");
                builder.bodies[id.index()] = Some(GrammarNode::Select(children));
                flat.push(GrammarNode::Ref(id));
            }
            atom => flat.push(atom),
        }
    }
    match flat.len() {
        0 => GrammarNode::Epsilon,
        1 => flat.pop().unwrap(),
        _ => GrammarNode::Join(flat),
    }
}

fn mk_select(parts: Vec<GrammarNode>) -> GrammarNode {
    let mut flat = Vec::new();
    for part in parts {
        match part {
            GrammarNode::Select(children) => flat.extend(children),
            other => flat.push(other),
        }
    }
    match flat.len() {
        1 => flat.pop().unwrap(),
        _ => GrammarNode::Select(flat),
    }
}

fn desugar(node: &Sugar, builder: &mut Builder) -> Result<GrammarNode, GrammarError> {
    Ok(match node {
        Sugar::Literal(bytes) => match bytes.len() {
            0 => GrammarNode::Epsilon,
            1 => GrammarNode::Byte(bytes[0]),
            _ => GrammarNode::Join(bytes.iter().map(|&b| GrammarNode::Byte(b)).collect()),
        },
        Sugar::Range(lo, hi) => GrammarNode::ByteRange(*lo, *hi),
        Sugar::Ref(name, _, _) => {
            let id = builder
                .resolve(name)
                .ok_or_else(|| GrammarError::UnknownRule(name.clone()))?;
            GrammarNode::Ref(id)
        }
        Sugar::Seq(items) => {
            let parts = items
                .iter()
                .map(|i| desugar(i, builder))
                .collect::<Result<Vec<_>, _>>()?;
            mk_join(parts, builder)
        }
        Sugar::Alt(items) => {
            let parts = items
                .iter()
                .map(|i| desugar(i, builder))
                .collect::<Result<Vec<_>, _>>()?;
            mk_select(parts)
        }
        Sugar::Opt(inner) => {
            let x = desugar(inner, builder)?;
            if x == GrammarNode::Epsilon {
                GrammarNode::Epsilon
            } else {
                mk_select(vec![x, GrammarNode::Epsilon])
            }
        }
        Sugar::Star(inner) => {
            let x = desugar(inner, builder)?;
            if x == GrammarNode::Epsilon {
                GrammarNode::Epsilon
            } else {
                GrammarNode::Ref(star_rule(x, builder))
            }
        }
        Sugar::Plus(inner) => {
            let x = desugar(inner, builder)?;
            if x == GrammarNode::Epsilon {
                GrammarNode::Epsilon
            } else {
                let rep = star_rule(x.clone(), builder);
                mk_join(vec![x, GrammarNode::Ref(rep)], builder)
            }
        }
    })
}

/// `R: | x R` — the right-recursive loop rule shared by `*` and `+`.
fn star_rule(x: GrammarNode, builder: &mut Builder) -> RuleId {
    let id = builder.fresh("__rep");
    let body = mk_select(vec![
        GrammarNode::Epsilon,
        mk_join(vec![x, GrammarNode::Ref(id)], builder),
    ]);
    builder.bodies[id.index()] = Some(body);
    id
}

pub(super) fn parse_grammar(source: &str) -> Result<Grammar, GrammarError> {
    let toks = Lexer::new(source).lex()?;

    // Split the token stream at rule headers: a name in column 1 followed
    // by a colon. Everything else belongs to the previous expansion.
    let mut headers: Vec<(usize, String, usize, usize)> = Vec::new(); // (tok index, name, line, col)
    for (i, t) in toks.iter().enumerate() {
        if t.col == 1 {
            match (&t.tok, toks.get(i + 1).map(|n| &n.tok)) {
                (Tok::Name(name), Some(Tok::Colon)) => {
                    headers.push((i, name.clone(), t.line, t.col));
                }
                _ => {
                    return Err(err(
                        t.line,
                        t.col,
                        "expected rule definition (continuation lines must be indented)",
                    ))
                }
            }
        }
    }
    if toks.is_empty() || headers.is_empty() {
        return Err(GrammarError::MissingStart);
    }
    if headers[0].0 != 0 {
        let t = &toks[0];
        return Err(err(t.line, t.col, "expected rule definition"));
    }

    let (last_line, last_col) = toks
        .last()
        .map(|t| (t.line, t.col + 1))
        .unwrap_or((1, 1));

    let mut builder = Builder {
        names: Vec::new(),
        bodies: Vec::new(),
        by_name: HashMap::new(),
        rep_counter: 0,
        grp_counter: 0,
    };
    let mut spans = Vec::new(); // expansion token range per user rule
    for (h, (start_idx, name, line, col)) in headers.iter().enumerate() {
        if builder.by_name.contains_key(name) {
            return Err(err(*line, *col, format!("duplicate rule `{name}`")));
        }
        let id = RuleId(builder.names.len() as u32);
        builder.by_name.insert(name.clone(), id);
        builder.names.push(name.clone());
        builder.bodies.push(None);
        let body_start = start_idx + 2;
        let body_end = headers
            .get(h + 1)
            .map(|(next, _, _, _)| *next)
            .unwrap_or(toks.len());
        spans.push((id, body_start, body_end));
    }

    for (id, lo, hi) in spans {
        let slice = &toks[lo..hi];
        let mut parser = ExpParser {
            toks: slice,
            pos: 0,
            end_line: last_line,
            end_col: last_col,
        };
        let sugar = parser.parse_alt()?;
        if parser.pos != slice.len() {
            let t = &slice[parser.pos];
            return Err(err(t.line, t.col, "unexpected token in expansion"));
        }
        let body = desugar(&sugar, &mut builder)?;
        builder.bodies[id.index()] = Some(body);
    }

    let bodies = builder
        .bodies
        .into_iter()
        .map(|b| b.expect("all rule bodies filled"))
        .collect();
    Grammar::from_normalized(builder.names, bodies)
}

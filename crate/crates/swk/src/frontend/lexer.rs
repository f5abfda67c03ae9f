//! Lexer for SWK source text.
//!
//! Keywords are case-insensitive (so `DO`/`do` and `END DO` both work);
//! identifiers are case-sensitive. `!` starts a comment unless the line
//! continues with `$omp` or `$o2ath`, in which case the whole sentinel line
//! is lexed into one directive token.

use super::token::{Clause, DirKind, DirectiveTok, Kw, Tok, Token};
use crate::diag::{Diagnostic, Span};

pub struct SourceFile {
    pub path: String,
    pub contents: String,
}

impl SourceFile {
    pub fn new(path: impl Into<String>, contents: impl Into<String>) -> SourceFile {
        SourceFile { path: path.into(), contents: contents.into() }
    }
}

struct Lexer<'a> {
    src: &'a str,
    chars: Vec<char>,
    pos: usize,
    line: u32,
    col: u32,
    file: String,
    tokens: Vec<Token>,
    diags: Vec<Diagnostic>,
}

pub fn tokenize(src: &SourceFile) -> (Vec<Token>, Vec<Diagnostic>) {
    let mut lx = Lexer {
        src: &src.contents,
        chars: src.contents.chars().collect(),
        pos: 0,
        line: 1,
        col: 1,
        file: src.path.clone(),
        tokens: Vec::new(),
        diags: Vec::new(),
    };
    lx.run();
    (lx.tokens, lx.diags)
}

impl<'a> Lexer<'a> {
    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn peek2(&self) -> Option<char> {
        self.chars.get(self.pos + 1).copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += 1;
        if c == '\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn here(&self) -> Span {
        Span::point(self.line, self.col)
    }

    fn push(&mut self, tok: Tok, span: Span) {
        self.tokens.push(Token { tok, span });
    }

    fn run(&mut self) {
        let _ = self.src;
        while let Some(c) = self.peek() {
            match c {
                ' ' | '\t' | '\r' => {
                    self.bump();
                }
                '\n' => {
                    let sp = self.here();
                    self.bump();
                    // collapse repeated blank lines
                    if !matches!(self.tokens.last().map(|t| &t.tok), Some(Tok::Newline) | None) {
                        self.push(Tok::Newline, sp);
                    }
                }
                '!' => self.comment_or_directive(),
                '(' => self.single(Tok::LParen),
                ')' => self.single(Tok::RParen),
                ',' => self.single(Tok::Comma),
                ':' => self.single(Tok::Colon),
                '%' => self.single(Tok::Percent),
                '+' => self.single(Tok::Plus),
                '-' => self.single(Tok::Minus),
                '*' => self.single(Tok::Star),
                '/' => {
                    let sp = self.here();
                    self.bump();
                    if self.peek() == Some('=') {
                        self.bump();
                        self.push(Tok::Ne, sp);
                    } else {
                        self.push(Tok::Slash, sp);
                    }
                }
                '=' => {
                    let sp = self.here();
                    self.bump();
                    if self.peek() == Some('=') {
                        self.bump();
                        self.push(Tok::EqEq, sp);
                    } else {
                        self.push(Tok::Assign, sp);
                    }
                }
                '<' => {
                    let sp = self.here();
                    self.bump();
                    if self.peek() == Some('=') {
                        self.bump();
                        self.push(Tok::Le, sp);
                    } else {
                        self.push(Tok::Lt, sp);
                    }
                }
                '>' => {
                    let sp = self.here();
                    self.bump();
                    if self.peek() == Some('=') {
                        self.bump();
                        self.push(Tok::Ge, sp);
                    } else {
                        self.push(Tok::Gt, sp);
                    }
                }
                c if c.is_ascii_digit() => self.number(),
                c if c.is_ascii_alphabetic() || c == '_' => self.word(),
                other => {
                    let sp = self.here();
                    self.bump();
                    self.diags.push(Diagnostic::error(
                        &self.file,
                        sp,
                        format!("illegal character '{other}'"),
                    ));
                }
            }
        }
        if !matches!(self.tokens.last().map(|t| &t.tok), Some(Tok::Newline) | None) {
            self.push(Tok::Newline, self.here());
        }
        self.push(Tok::Eof, self.here());
    }

    fn single(&mut self, tok: Tok) {
        let sp = self.here();
        self.bump();
        self.push(tok, sp);
    }

    fn number(&mut self) {
        let start = self.here();
        let mut text = String::new();
        let mut is_float = false;
        while let Some(c) = self.peek() {
            if c.is_ascii_digit() {
                text.push(c);
                self.bump();
            } else if c == '.' && !is_float && self.peek2().map_or(false, |c| c.is_ascii_digit()) {
                is_float = true;
                text.push(c);
                self.bump();
            } else if (c == 'e' || c == 'E') && !text.is_empty() {
                // exponent only if followed by digit or sign+digit
                let next = self.peek2();
                let sign_then_digit = matches!(next, Some('+') | Some('-'))
                    && self.chars.get(self.pos + 2).map_or(false, |c| c.is_ascii_digit());
                if next.map_or(false, |c| c.is_ascii_digit()) || sign_then_digit {
                    is_float = true;
                    text.push('e');
                    self.bump();
                    if matches!(self.peek(), Some('+') | Some('-')) {
                        text.push(self.bump().unwrap());
                    }
                    while self.peek().map_or(false, |c| c.is_ascii_digit()) {
                        text.push(self.bump().unwrap());
                    }
                    break;
                } else {
                    break;
                }
            } else {
                break;
            }
        }
        let mut span = start;
        span.end_col = self.col;
        if is_float {
            match text.parse::<f64>() {
                Ok(v) => self.push(Tok::Float(v), span),
                Err(_) => self.diags.push(Diagnostic::error(
                    &self.file,
                    span,
                    format!("malformed float literal '{text}'"),
                )),
            }
        } else {
            match text.parse::<i64>() {
                Ok(v) => self.push(Tok::Int(v), span),
                Err(_) => self.diags.push(Diagnostic::error(
                    &self.file,
                    span,
                    format!("integer literal '{text}' out of range"),
                )),
            }
        }
    }

    fn word(&mut self) {
        let start = self.here();
        let mut text = String::new();
        while let Some(c) = self.peek() {
            if c.is_ascii_alphanumeric() || c == '_' {
                text.push(c);
                self.bump();
            } else {
                break;
            }
        }
        let mut span = start;
        span.end_col = self.col;
        match Kw::from_ident(&text) {
            Some(kw) => self.push(Tok::Kw(kw), span),
            None => self.push(Tok::Ident(text), span),
        }
    }

    fn rest_of_line(&mut self) -> String {
        let mut s = String::new();
        while let Some(c) = self.peek() {
            if c == '\n' {
                break;
            }
            s.push(c);
            self.bump();
        }
        s
    }

    fn comment_or_directive(&mut self) {
        let start = self.here();
        // examine without consuming newline
        let rest: String = self.chars[self.pos..].iter().take_while(|&&c| c != '\n').collect();
        let lower = rest.to_ascii_lowercase();
        if lower.starts_with("!$omp") || lower.starts_with("!$o2ath") {
            let line_text = self.rest_of_line();
            self.directive(start, &line_text);
            // the trailing newline is lexed in the main loop
        } else {
            self.rest_of_line();
        }
    }

    fn directive(&mut self, start: Span, text: &str) {
        let mut span = start;
        span.end_col = start.col + text.chars().count() as u32;
        match parse_directive(text, start) {
            Ok(d) => self.push(Tok::Directive(d), span),
            Err(msg) => self.diags.push(Diagnostic::error(&self.file, span, msg)),
        }
        // ensure a statement boundary after the directive
        self.push(Tok::Newline, Span::point(span.end_line, span.end_col));
    }
}

/// Split a sentinel line (`!$omp target private(tid) device(0)`) into a
/// directive token. Returns a message on malformed input.
fn parse_directive(text: &str, start: Span) -> Result<DirectiveTok, String> {
    let mut words = DirWords::new(text, start);
    let sentinel = words.word().ok_or("empty directive")?;
    let sentinel_lower = sentinel.0.to_ascii_lowercase();
    if sentinel_lower == "!$o2ath" {
        let kw = words.word().ok_or("expected 'entry' after !$o2ath")?;
        if !kw.0.eq_ignore_ascii_case("entry") {
            return Err(format!("unknown !$o2ath directive '{}'", kw.0));
        }
        let name = words.word().ok_or("expected routine name after '!$o2ath entry'")?;
        if words.word().is_some() {
            return Err("unexpected text after '!$o2ath entry <name>'".into());
        }
        return Ok(DirectiveTok { kind: DirKind::O2athEntry(name.0), clauses: Vec::new() });
    }
    debug_assert_eq!(sentinel_lower, "!$omp");
    let first = words.word().ok_or("expected directive name after !$omp")?;
    let first_lower = first.0.to_ascii_lowercase();
    let kind = match first_lower.as_str() {
        "end" => {
            let second = words.word().ok_or("expected directive name after '!$omp end'")?;
            match second.0.to_ascii_lowercase().as_str() {
                "target" => DirKind::EndTarget,
                "master" => DirKind::EndMaster,
                "single" => DirKind::EndSingle,
                "critical" => DirKind::CriticalEnd,
                other => return Err(format!("unknown directive '!$omp end {other}'")),
            }
        }
        "target" => DirKind::Target,
        "declare" => {
            let second = words.word().ok_or("expected 'target' after '!$omp declare'")?;
            if !second.0.eq_ignore_ascii_case("target") {
                return Err(format!("unknown directive '!$omp declare {}'", second.0));
            }
            DirKind::DeclareTarget
        }
        "barrier" => DirKind::Barrier,
        "critical" => DirKind::CriticalBegin,
        "master" => DirKind::Master,
        "single" => DirKind::Single,
        other => return Err(format!("unknown directive '!$omp {other}'")),
    };
    let mut clauses = Vec::new();
    while let Some((word, wspan, args)) = words.clause()? {
        if kind != DirKind::Target {
            return Err(format!("directive does not accept a '{word}' clause"));
        }
        match word.to_ascii_lowercase().as_str() {
            "device" => {
                let args = args.ok_or("device clause requires '(n)'")?;
                if args.len() != 1 {
                    return Err("device clause takes exactly one argument".into());
                }
                let value: i64 = args[0]
                    .0
                    .trim()
                    .parse()
                    .map_err(|_| format!("device clause argument '{}' is not an integer", args[0].0))?;
                clauses.push(Clause::Device { value, span: wspan });
            }
            "private" => {
                let args = args.ok_or("private clause requires '(v1, ...)'")?;
                let mut vars = Vec::new();
                for (a, aspan) in args {
                    let name = a.trim().to_string();
                    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
                    {
                        return Err(format!("bad private clause variable '{a}'"));
                    }
                    vars.push((name, aspan));
                }
                if vars.is_empty() {
                    return Err("private clause lists no variables".into());
                }
                clauses.push(Clause::Private { vars, span: wspan });
            }
            other => return Err(format!("unknown clause '{other}'")),
        }
    }
    Ok(DirectiveTok { kind, clauses })
}

/// Tiny scanner over the text of one directive line.
struct DirWords<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
    line: u32,
    col: u32,
}

impl<'a> DirWords<'a> {
    fn new(text: &'a str, start: Span) -> DirWords<'a> {
        DirWords { chars: text.chars().peekable(), line: start.line, col: start.col }
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.chars.next()?;
        self.col += 1;
        Some(c)
    }

    fn skip_ws(&mut self) {
        while matches!(self.chars.peek(), Some(' ') | Some('\t')) {
            self.bump();
        }
    }

    fn word(&mut self) -> Option<(String, Span)> {
        self.skip_ws();
        let start = Span::point(self.line, self.col);
        let mut s = String::new();
        while let Some(&c) = self.chars.peek() {
            if c.is_ascii_alphanumeric() || c == '_' || c == '!' || c == '$' {
                s.push(c);
                self.bump();
            } else {
                break;
            }
        }
        if s.is_empty() {
            None
        } else {
            let mut sp = start;
            sp.end_col = self.col;
            Some((s, sp))
        }
    }

    /// Next clause: a word optionally followed by a parenthesized
    /// comma-separated argument list.
    #[allow(clippy::type_complexity)]
    fn clause(&mut self) -> Result<Option<(String, Span, Option<Vec<(String, Span)>>)>, String> {
        let Some((word, wspan)) = self.word() else {
            self.skip_ws();
            if self.chars.peek().is_some() {
                return Err("unexpected text in directive".into());
            }
            return Ok(None);
        };
        self.skip_ws();
        if self.chars.peek() == Some(&'(') {
            self.bump();
            let mut args = Vec::new();
            let mut cur = String::new();
            let mut cur_start = Span::point(self.line, self.col);
            loop {
                match self.bump() {
                    None => return Err(format!("unterminated '(' in clause '{word}'")),
                    Some(')') => {
                        let mut sp = cur_start;
                        sp.end_col = self.col - 1;
                        args.push((cur.trim().to_string(), sp));
                        break;
                    }
                    Some(',') => {
                        let mut sp = cur_start;
                        sp.end_col = self.col - 1;
                        args.push((cur.trim().to_string(), sp));
                        cur = String::new();
                        cur_start = Span::point(self.line, self.col);
                    }
                    Some(c) => cur.push(c),
                }
            }
            Ok(Some((word, wspan, Some(args))))
        } else {
            Ok(Some((word, wspan, None)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lex(s: &str) -> (Vec<Token>, Vec<Diagnostic>) {
        tokenize(&SourceFile::new("t.swk", s))
    }

    #[test]
    fn directive_with_clauses() {
        let (toks, diags) = lex("!$omp target private(tid) device(0)\n");
        assert!(diags.is_empty());
        let dir = toks
            .iter()
            .find_map(|t| match &t.tok {
                Tok::Directive(d) => Some(d.clone()),
                _ => None,
            })
            .expect("directive token");
        assert_eq!(dir.kind, DirKind::Target);
        assert_eq!(dir.clauses.len(), 2);
        assert!(matches!(&dir.clauses[0], Clause::Private { vars, .. } if vars.len() == 1 && vars[0].0 == "tid"));
        assert!(matches!(&dir.clauses[1], Clause::Device { value: 0, .. }));
    }

    #[test]
    fn empty_stream() {
        let (toks, diags) = lex("");
        assert!(diags.is_empty());
        assert_eq!(toks.len(), 1);
        assert_eq!(toks[0].tok, Tok::Eof);
    }

    #[test]
    fn loop_header_tokens() {
        let (toks, diags) = lex("do j = js+tid, je, 64\n");
        assert!(diags.is_empty());
        let kinds: Vec<&Tok> = toks.iter().map(|t| &t.tok).collect();
        assert!(matches!(kinds[0], Tok::Kw(Kw::Do)));
        assert!(matches!(kinds[1], Tok::Ident(s) if s == "j"));
        assert!(matches!(kinds[2], Tok::Assign));
        assert!(matches!(kinds[3], Tok::Ident(s) if s == "js"));
        assert!(matches!(kinds[4], Tok::Plus));
        assert!(matches!(kinds[5], Tok::Ident(s) if s == "tid"));
        assert!(matches!(kinds[6], Tok::Comma));
        assert!(matches!(kinds[7], Tok::Ident(s) if s == "je"));
        assert!(matches!(kinds[8], Tok::Comma));
        assert!(matches!(kinds[9], Tok::Int(64)));
        // every token carries a span
        for t in &toks {
            if !matches!(t.tok, Tok::Eof | Tok::Newline) {
                assert!(t.span.line >= 1 && t.span.col >= 1);
            }
        }
    }

    #[test]
    fn uppercase_keywords_and_comments() {
        let (toks, diags) = lex("DO i = 1, 10 ! trailing comment\nEND DO\n");
        assert!(diags.is_empty());
        assert!(toks.iter().any(|t| matches!(t.tok, Tok::Kw(Kw::Do))));
        assert!(toks.iter().any(|t| matches!(t.tok, Tok::Kw(Kw::End))));
    }

    #[test]
    fn illegal_character_has_span() {
        let (_, diags) = lex("var x # 3\n");
        assert_eq!(diags.len(), 1);
        assert!(diags[0].message.contains("illegal character"));
        assert_eq!(diags[0].span.line, 1);
        assert_eq!(diags[0].span.col, 7);
    }

    #[test]
    fn o2ath_entry_directive() {
        let (toks, diags) = lex("!$o2ath entry helper\n");
        assert!(diags.is_empty());
        assert!(toks.iter().any(|t| matches!(
            &t.tok,
            Tok::Directive(DirectiveTok { kind: DirKind::O2athEntry(n), .. }) if n == "helper"
        )));
    }

    #[test]
    fn not_equal_vs_division() {
        let (toks, diags) = lex("if (a /= b / 2) then\n");
        assert!(diags.is_empty());
        assert!(toks.iter().any(|t| matches!(t.tok, Tok::Ne)));
        assert!(toks.iter().any(|t| matches!(t.tok, Tok::Slash)));
    }
}

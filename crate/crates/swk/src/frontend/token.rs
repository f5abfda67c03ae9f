//! Token stream produced by the lexer.

use crate::diag::Span;

#[derive(Debug, Clone, PartialEq)]
pub enum Tok {
    Ident(String),
    Int(i64),
    Float(f64),
    Kw(Kw),
    Directive(DirectiveTok),
    LParen,
    RParen,
    Comma,
    Colon,
    Percent,
    Assign,
    Plus,
    Minus,
    Star,
    Slash,
    EqEq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Newline,
    Eof,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kw {
    Routine,
    End,
    Record,
    Extends,
    Field,
    Var,
    Do,
    If,
    Then,
    Else,
    Call,
    Return,
    Extern,
    Mod,
    And,
    Or,
    Not,
    Handle,
}

impl Kw {
    pub fn from_ident(s: &str) -> Option<Kw> {
        let lower = s.to_ascii_lowercase();
        Some(match lower.as_str() {
            "routine" => Kw::Routine,
            "end" => Kw::End,
            "record" => Kw::Record,
            "extends" => Kw::Extends,
            "field" => Kw::Field,
            "var" => Kw::Var,
            "do" => Kw::Do,
            "if" => Kw::If,
            "then" => Kw::Then,
            "else" => Kw::Else,
            "call" => Kw::Call,
            "return" => Kw::Return,
            "extern" => Kw::Extern,
            "mod" => Kw::Mod,
            "and" => Kw::And,
            "or" => Kw::Or,
            "not" => Kw::Not,
            "handle" => Kw::Handle,
            _ => return None,
        })
    }

    pub fn text(self) -> &'static str {
        match self {
            Kw::Routine => "routine",
            Kw::End => "end",
            Kw::Record => "record",
            Kw::Extends => "extends",
            Kw::Field => "field",
            Kw::Var => "var",
            Kw::Do => "do",
            Kw::If => "if",
            Kw::Then => "then",
            Kw::Else => "else",
            Kw::Call => "call",
            Kw::Return => "return",
            Kw::Extern => "extern",
            Kw::Mod => "mod",
            Kw::And => "and",
            Kw::Or => "or",
            Kw::Not => "not",
            Kw::Handle => "handle",
        }
    }
}

/// `!$omp ...` and `!$o2ath ...` sentinel lines are lexed into a single
/// directive token with clauses already split out.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectiveTok {
    pub kind: DirKind,
    pub clauses: Vec<Clause>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DirKind {
    Target,
    EndTarget,
    DeclareTarget,
    Barrier,
    CriticalBegin,
    CriticalEnd,
    Master,
    EndMaster,
    Single,
    EndSingle,
    /// `!$o2ath entry <name>`: marks a routine for device compilation from source.
    O2athEntry(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Clause {
    Device { value: i64, span: Span },
    Private { vars: Vec<(String, Span)>, span: Span },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub tok: Tok,
    pub span: Span,
}

impl Token {
    pub fn describe(&self) -> String {
        match &self.tok {
            Tok::Ident(s) => format!("identifier '{s}'"),
            Tok::Int(v) => format!("integer {v}"),
            Tok::Float(v) => format!("float {v}"),
            Tok::Kw(k) => format!("'{}'", k.text()),
            Tok::Directive(d) => format!("directive {:?}", d.kind),
            Tok::LParen => "'('".into(),
            Tok::RParen => "')'".into(),
            Tok::Comma => "','".into(),
            Tok::Colon => "':'".into(),
            Tok::Percent => "'%'".into(),
            Tok::Assign => "'='".into(),
            Tok::Plus => "'+'".into(),
            Tok::Minus => "'-'".into(),
            Tok::Star => "'*'".into(),
            Tok::Slash => "'/'".into(),
            Tok::EqEq => "'=='".into(),
            Tok::Ne => "'/='".into(),
            Tok::Lt => "'<'".into(),
            Tok::Le => "'<='".into(),
            Tok::Gt => "'>'".into(),
            Tok::Ge => "'>='".into(),
            Tok::Newline => "end of line".into(),
            Tok::Eof => "end of file".into(),
        }
    }
}

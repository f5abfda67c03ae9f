//! Recursive-descent parser from tokens to a `ProgramUnit`.

use super::ast::*;
use super::lexer::{self, SourceFile};
use super::token::{Clause, DirKind, Kw, Tok, Token};
use crate::diag::{Diagnostic, Span};

/// Convenience entry point: lex and parse one source file.
pub fn parse_source(src: &SourceFile) -> ProgramUnit {
    let (tokens, lex_diags) = lexer::tokenize(src);
    let mut unit = parse(&tokens, &src.path);
    let mut diags = lex_diags;
    diags.append(&mut unit.diagnostics);
    unit.diagnostics = diags;
    unit
}

pub fn parse(tokens: &[Token], path: &str) -> ProgramUnit {
    let mut p = Parser {
        toks: tokens,
        pos: 0,
        path: path.to_string(),
        diags: Vec::new(),
        next_id: 0,
    };
    let mut unit = ProgramUnit {
        path: path.to_string(),
        routines: Vec::new(),
        record_types: Vec::new(),
        globals: Vec::new(),
        externs: Vec::new(),
        o2ath_entries: Vec::new(),
        diagnostics: Vec::new(),
    };
    p.skip_newlines();
    while !p.at_eof() {
        match p.peek().clone() {
            Tok::Kw(Kw::Routine) => {
                if let Some(r) = p.routine(false) {
                    unit.routines.push(r);
                }
            }
            Tok::Kw(Kw::Record) => {
                if let Some(r) = p.record() {
                    unit.record_types.push(r);
                }
            }
            Tok::Kw(Kw::Var) => {
                if let Some(v) = p.var_decl(Storage::Global) {
                    unit.globals.push(v);
                }
            }
            Tok::Kw(Kw::Extern) => {
                if let Some(e) = p.extern_decl() {
                    unit.externs.push(e);
                }
            }
            Tok::Directive(d) => {
                let span = p.span();
                p.bump();
                match d.kind {
                    DirKind::O2athEntry(name) => unit.o2ath_entries.push((name, span)),
                    other => p.error(span, format!("directive {other:?} is not valid at file scope")),
                }
            }
            _ => {
                let span = p.span();
                let desc = p.current().describe();
                p.error(span, format!("expected routine, record, var or extern, found {desc}"));
                p.skip_line();
            }
        }
        p.skip_newlines();
    }
    unit.diagnostics = p.diags;
    unit
}

struct Parser<'a> {
    toks: &'a [Token],
    pos: usize,
    path: String,
    diags: Vec<Diagnostic>,
    next_id: u32,
}

/// What closes the block currently being parsed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BlockEnd {
    Routine,
    Do,
    IfElse,
    Target,
    Master,
    Single,
}

impl<'a> Parser<'a> {
    fn id(&mut self) -> NodeId {
        self.next_id += 1;
        NodeId(self.next_id)
    }

    fn current(&self) -> &Token {
        &self.toks[self.pos.min(self.toks.len() - 1)]
    }

    fn peek(&self) -> &Tok {
        &self.current().tok
    }

    fn peek_at(&self, n: usize) -> &Tok {
        &self.toks[(self.pos + n).min(self.toks.len() - 1)].tok
    }

    fn span(&self) -> Span {
        self.current().span
    }

    fn at_eof(&self) -> bool {
        matches!(self.peek(), Tok::Eof)
    }

    fn bump(&mut self) -> &Token {
        let t = &self.toks[self.pos.min(self.toks.len() - 1)];
        if self.pos < self.toks.len() - 1 {
            self.pos += 1;
        }
        t
    }

    fn error(&mut self, span: Span, msg: impl Into<String>) {
        self.diags.push(Diagnostic::error(&self.path, span, msg));
    }

    fn skip_line(&mut self) {
        while !matches!(self.peek(), Tok::Newline | Tok::Eof) {
            self.bump();
        }
        if matches!(self.peek(), Tok::Newline) {
            self.bump();
        }
    }

    fn skip_newlines(&mut self) {
        while matches!(self.peek(), Tok::Newline) {
            self.bump();
        }
    }

    fn expect_kw(&mut self, kw: Kw) -> bool {
        if matches!(self.peek(), Tok::Kw(k) if *k == kw) {
            self.bump();
            true
        } else {
            let span = self.span();
            let desc = self.current().describe();
            self.error(span, format!("expected '{}', found {desc}", kw.text()));
            false
        }
    }

    fn expect(&mut self, tok: Tok, what: &str) -> bool {
        if *self.peek() == tok {
            self.bump();
            true
        } else {
            let span = self.span();
            let desc = self.current().describe();
            self.error(span, format!("expected {what}, found {desc}"));
            false
        }
    }

    fn expect_newline(&mut self) {
        if matches!(self.peek(), Tok::Newline | Tok::Eof) {
            self.skip_newlines();
        } else {
            let span = self.span();
            let desc = self.current().describe();
            self.error(span, format!("expected end of line, found {desc}"));
            self.skip_line();
        }
    }

    fn ident(&mut self, what: &str) -> Option<(String, Span)> {
        if let Tok::Ident(s) = self.peek() {
            let s = s.clone();
            let span = self.span();
            self.bump();
            Some((s, span))
        } else {
            let span = self.span();
            let desc = self.current().describe();
            self.error(span, format!("expected {what}, found {desc}"));
            None
        }
    }

    // ---- declarations ------------------------------------------------

    fn routine(&mut self, is_method: bool) -> Option<Routine> {
        let start = self.span();
        self.bump(); // 'routine'
        let (name, _) = self.ident("routine name")?;
        self.expect(Tok::LParen, "'('");
        let mut params = Vec::new();
        if !matches!(self.peek(), Tok::RParen) {
            loop {
                let Some((pname, pspan)) = self.ident("parameter name") else {
                    self.skip_line();
                    return None;
                };
                if !self.expect(Tok::Colon, "':'") {
                    self.skip_line();
                    return None;
                }
                let ty = self.ty()?;
                params.push(VarDecl { name: pname, ty, storage: Storage::Param, span: pspan });
                if matches!(self.peek(), Tok::Comma) {
                    self.bump();
                } else {
                    break;
                }
            }
        }
        self.expect(Tok::RParen, "')'");
        self.expect_newline();
        let mut routine = Routine {
            name,
            params,
            body: Vec::new(),
            nested: Vec::new(),
            attributes: RoutineAttrs::default(),
            is_virtual_method_of: None,
            span: start,
            id: self.id(),
        };
        let mut body = Vec::new();
        self.block(BlockEnd::Routine, true, &mut body, Some(&mut routine));
        routine.body = body;
        let _ = is_method;
        Some(routine)
    }

    fn record(&mut self) -> Option<RecordType> {
        let start = self.span();
        self.bump(); // 'record'
        let (name, _) = self.ident("record name")?;
        let parent = if matches!(self.peek(), Tok::Kw(Kw::Extends)) {
            self.bump();
            Some(self.ident("parent record name")?.0)
        } else {
            None
        };
        self.expect_newline();
        let mut rec =
            RecordType { name, parent, fields: Vec::new(), methods: Vec::new(), span: start };
        loop {
            self.skip_newlines();
            match self.peek() {
                Tok::Kw(Kw::Field) => {
                    self.bump();
                    if let Some((fname, fspan)) = self.ident("field name") {
                        if self.expect(Tok::Colon, "':'") {
                            if let Some(ty) = self.ty() {
                                rec.fields.push(VarDecl {
                                    name: fname,
                                    ty,
                                    storage: Storage::Local,
                                    span: fspan,
                                });
                            }
                        }
                    }
                    self.expect_newline();
                }
                Tok::Kw(Kw::Routine) => {
                    if let Some(mut m) = self.routine(true) {
                        m.is_virtual_method_of = Some(rec.name.clone());
                        rec.methods.push(m);
                    }
                }
                Tok::Kw(Kw::End) => {
                    self.bump();
                    self.expect_kw(Kw::Record);
                    self.expect_newline();
                    break;
                }
                Tok::Eof => {
                    let span = self.span();
                    self.error(span, format!("record '{}' not closed by 'end record'", rec.name));
                    break;
                }
                _ => {
                    let span = self.span();
                    let desc = self.current().describe();
                    self.error(span, format!("expected field, routine or 'end record', found {desc}"));
                    self.skip_line();
                }
            }
        }
        Some(rec)
    }

    fn extern_decl(&mut self) -> Option<ExternDecl> {
        let start = self.span();
        self.bump(); // 'extern'
        self.expect_kw(Kw::Routine);
        let (name, _) = self.ident("routine name")?;
        self.expect(Tok::LParen, "'('");
        let mut params = Vec::new();
        if !matches!(self.peek(), Tok::RParen) {
            loop {
                let (pname, pspan) = self.ident("parameter name")?;
                self.expect(Tok::Colon, "':'");
                let ty = self.ty()?;
                params.push(VarDecl { name: pname, ty, storage: Storage::Param, span: pspan });
                if matches!(self.peek(), Tok::Comma) {
                    self.bump();
                } else {
                    break;
                }
            }
        }
        self.expect(Tok::RParen, "')'");
        self.expect_newline();
        Some(ExternDecl { name, params, span: start })
    }

    fn var_decl(&mut self, storage: Storage) -> Option<VarDecl> {
        self.bump(); // 'var'
        let (name, span) = self.ident("variable name")?;
        if !self.expect(Tok::Colon, "':'") {
            self.skip_line();
            return None;
        }
        let ty = self.ty()?;
        self.expect_newline();
        Some(VarDecl { name, ty, storage, span })
    }

    fn ty(&mut self) -> Option<Type> {
        let span = self.span();
        let (name, _) = self.ident("type name")?;
        match name.as_str() {
            "int64" => Some(Type::Int64),
            "float64" => Some(Type::Float64),
            "routine_handle" => Some(Type::RoutineHandle),
            "array" => {
                self.expect(Tok::LParen, "'('");
                let (elem_name, espan) = self.ident("element type")?;
                let elem = match elem_name.as_str() {
                    "int64" => ScalarTy::Int64,
                    "float64" => ScalarTy::Float64,
                    other => {
                        self.error(espan, format!("array element type must be int64 or float64, got '{other}'"));
                        ScalarTy::Int64
                    }
                };
                let mut extents = Vec::new();
                while matches!(self.peek(), Tok::Comma) {
                    self.bump();
                    extents.push(self.extent()?);
                }
                self.expect(Tok::RParen, "')'");
                if extents.is_empty() || extents.len() > 3 {
                    self.error(span, format!("array rank must be 1..=3, got {}", extents.len()));
                    return None;
                }
                Some(Type::Array(elem, ArrayShape { extents }))
            }
            _ => Some(Type::Record(name)),
        }
    }

    fn extent(&mut self) -> Option<Extent> {
        match self.peek().clone() {
            Tok::Colon => {
                self.bump();
                Some(Extent::Deferred)
            }
            Tok::Int(a) => {
                self.bump();
                if matches!(self.peek(), Tok::Colon) {
                    self.bump();
                    if let Tok::Int(b) = *self.peek() {
                        self.bump();
                        Some(Extent::Fixed { lb: a, ub: b })
                    } else {
                        let span = self.span();
                        self.error(span, "expected integer upper bound after ':'");
                        None
                    }
                } else {
                    Some(Extent::Fixed { lb: 1, ub: a })
                }
            }
            Tok::Minus => {
                // negative lower bound, e.g. -2:5
                self.bump();
                if let Tok::Int(a) = *self.peek() {
                    self.bump();
                    self.expect(Tok::Colon, "':' after lower bound");
                    if let Tok::Int(b) = *self.peek() {
                        self.bump();
                        return Some(Extent::Fixed { lb: -a, ub: b });
                    }
                }
                let span = self.span();
                self.error(span, "malformed array extent");
                None
            }
            _ => {
                let span = self.span();
                self.error(span, "expected array extent (N, lo:hi or ':')");
                None
            }
        }
    }

    // ---- statements --------------------------------------------------

    /// Parse statements until the matching terminator. Returns true if the
    /// terminator was found (vs EOF).
    fn block(
        &mut self,
        end: BlockEnd,
        routine_top: bool,
        out: &mut Block,
        mut routine: Option<&mut Routine>,
    ) -> bool {
        loop {
            self.skip_newlines();
            match self.peek().clone() {
                Tok::Eof => {
                    let span = self.span();
                    self.error(span, format!("unexpected end of file inside {end:?} block"));
                    return false;
                }
                Tok::Kw(Kw::End) => {
                    match (*self.peek_at(1)).clone() {
                        Tok::Kw(Kw::Routine) if end == BlockEnd::Routine => {
                            self.bump();
                            self.bump();
                            self.expect_newline();
                            return true;
                        }
                        Tok::Kw(Kw::Do) if end == BlockEnd::Do => {
                            self.bump();
                            self.bump();
                            self.expect_newline();
                            return true;
                        }
                        Tok::Kw(Kw::If) if end == BlockEnd::IfElse => {
                            // caller consumes
                            return true;
                        }
                        _ => {
                            if end == BlockEnd::IfElse {
                                return true; // let the if-parser report
                            }
                            let span = self.span();
                            let next = self.peek_at(1).clone();
                            if matches!(end, BlockEnd::Target | BlockEnd::Master | BlockEnd::Single) {
                                self.error(
                                    span,
                                    format!("unbalanced directive: {end:?} region not closed before 'end'"),
                                );
                                return false;
                            }
                            self.error(span, format!("mismatched 'end' ({next:?}) inside {end:?} block"));
                            self.skip_line();
                        }
                    }
                }
                Tok::Kw(Kw::Else) if end == BlockEnd::IfElse => return true,
                Tok::Kw(Kw::Var) => {
                    if let Some(v) = self.var_decl(Storage::Local) {
                        out.push(Stmt::Local(v));
                    }
                }
                Tok::Kw(Kw::Routine) => {
                    if let Some(r) = self.routine(false) {
                        match routine.as_deref_mut() {
                            Some(parent) if routine_top => parent.nested.push(r),
                            _ => {
                                let span = r.span;
                                self.error(
                                    span,
                                    "nested routines may only be declared at routine body level",
                                );
                            }
                        }
                    }
                }
                Tok::Directive(d) => {
                    let span = self.span();
                    self.bump();
                    self.skip_newlines();
                    match d.kind {
                        DirKind::DeclareTarget => match routine.as_deref_mut() {
                            Some(r) if routine_top => r.attributes.declare_target = true,
                            _ => self.error(
                                span,
                                "'declare target' must appear directly in a routine body",
                            ),
                        },
                        DirKind::Target => {
                            if let Some(s) = self.target_region(span, &d.clauses, routine.as_deref_mut())
                            {
                                out.push(s);
                            }
                        }
                        DirKind::Master => {
                            let mut body = Vec::new();
                            let end_span =
                                self.region_body(BlockEnd::Master, &mut body, routine.as_deref_mut());
                            let id = self.id();
                            out.push(Stmt::Master { body, span, end_span, id });
                        }
                        DirKind::Single => {
                            let mut body = Vec::new();
                            let end_span =
                                self.region_body(BlockEnd::Single, &mut body, routine.as_deref_mut());
                            let id = self.id();
                            out.push(Stmt::Single { body, span, end_span, id });
                        }
                        DirKind::Barrier => {
                            let id = self.id();
                            out.push(Stmt::Barrier { span, id });
                        }
                        DirKind::CriticalBegin => {
                            let id = self.id();
                            out.push(Stmt::CriticalEnter { span, id });
                        }
                        DirKind::CriticalEnd => {
                            let id = self.id();
                            out.push(Stmt::CriticalExit { span, id });
                        }
                        DirKind::EndTarget | DirKind::EndMaster | DirKind::EndSingle => {
                            match (d.kind.clone(), end) {
                                (DirKind::EndTarget, BlockEnd::Target)
                                | (DirKind::EndMaster, BlockEnd::Master)
                                | (DirKind::EndSingle, BlockEnd::Single) => {
                                    self.pos -= 1; // let region_body consume it
                                    return true;
                                }
                                _ => self.error(
                                    span,
                                    format!("unbalanced directive: {:?} has no matching opener", d.kind),
                                ),
                            }
                        }
                        DirKind::O2athEntry(_) => {
                            self.error(span, "'!$o2ath entry' is only valid at file scope");
                        }
                    }
                }
                _ => {
                    if let Some(s) = self.statement() {
                        out.push(s);
                    }
                }
            }
        }
    }

    /// Parse a region body up to its end directive; returns the end span.
    fn region_body(&mut self, end: BlockEnd, out: &mut Block, routine: Option<&mut Routine>) -> Span {
        let found = self.block(end, false, out, routine);
        if found {
            if let Tok::Directive(d) = self.peek().clone() {
                let span = self.span();
                let matches_end = matches!(
                    (d.kind, end),
                    (DirKind::EndTarget, BlockEnd::Target)
                        | (DirKind::EndMaster, BlockEnd::Master)
                        | (DirKind::EndSingle, BlockEnd::Single)
                );
                if matches_end {
                    self.bump();
                    self.skip_newlines();
                    return span;
                }
            }
        }
        self.span()
    }

    fn target_region(
        &mut self,
        span: Span,
        clauses: &[Clause],
        mut routine: Option<&mut Routine>,
    ) -> Option<Stmt> {
        let mut private = Vec::new();
        let mut device: Option<(i64, Span)> = None;
        for c in clauses {
            match c {
                Clause::Private { vars, .. } => private.extend(vars.iter().cloned()),
                Clause::Device { value, span } => {
                    if device.is_some() {
                        self.error(*span, "duplicate device clause");
                    }
                    device = Some((*value, *span));
                }
            }
        }
        let mut body = Vec::new();
        let end_span = self.region_body(BlockEnd::Target, &mut body, routine.as_deref_mut());
        // nesting check is syntactic; the region is kept so the directive
        // stays represented in the tree
        if contains_target(&body) {
            self.error(span, "nesting error: a target region may not contain another target region");
        }
        let id = self.id();
        Some(Stmt::Target {
            body,
            private,
            device: device.map(|(v, _)| v).unwrap_or(0),
            span,
            end_span,
            id,
        })
    }

    fn statement(&mut self) -> Option<Stmt> {
        match self.peek().clone() {
            Tok::Kw(Kw::Do) => self.do_loop(),
            Tok::Kw(Kw::If) => self.if_stmt(),
            Tok::Kw(Kw::Call) => self.call_stmt(),
            Tok::Kw(Kw::Return) => {
                let span = self.span();
                self.bump();
                self.expect_newline();
                Some(Stmt::Return { span })
            }
            Tok::Ident(_) => {
                let target = self.designator()?;
                let span = target.span;
                if !self.expect(Tok::Assign, "'='") {
                    self.skip_line();
                    return None;
                }
                let value = self.expr()?;
                self.expect_newline();
                let id = self.id();
                Some(Stmt::Assign { target, value, span, id })
            }
            _ => {
                let span = self.span();
                let desc = self.current().describe();
                self.error(span, format!("expected a statement, found {desc}"));
                self.skip_line();
                None
            }
        }
    }

    fn do_loop(&mut self) -> Option<Stmt> {
        let span = self.span();
        self.bump(); // 'do'
        let (var, var_span) = self.ident("loop variable")?;
        if !self.expect(Tok::Assign, "'='") {
            self.skip_line();
            return None;
        }
        let from = self.expr()?;
        if !self.expect(Tok::Comma, "','") {
            self.skip_line();
            return None;
        }
        let to = self.expr()?;
        let step = if matches!(self.peek(), Tok::Comma) {
            self.bump();
            Some(self.expr()?)
        } else {
            None
        };
        self.expect_newline();
        let mut body = Vec::new();
        self.block(BlockEnd::Do, false, &mut body, None);
        let id = self.id();
        Some(Stmt::Do { var, var_span, from, to, step, body, span, id })
    }

    fn if_stmt(&mut self) -> Option<Stmt> {
        let span = self.span();
        self.bump(); // 'if'
        if !self.expect(Tok::LParen, "'('") {
            self.skip_line();
            return None;
        }
        let cond = self.expr()?;
        self.expect(Tok::RParen, "')'");
        self.expect_kw(Kw::Then);
        self.expect_newline();
        let mut then_body = Vec::new();
        self.block(BlockEnd::IfElse, false, &mut then_body, None);
        let mut else_body = None;
        if matches!(self.peek(), Tok::Kw(Kw::Else)) {
            self.bump();
            self.expect_newline();
            let mut b = Vec::new();
            self.block(BlockEnd::IfElse, false, &mut b, None);
            else_body = Some(b);
        }
        // consume 'end if'
        if matches!(self.peek(), Tok::Kw(Kw::End)) && matches!(self.peek_at(1), Tok::Kw(Kw::If)) {
            self.bump();
            self.bump();
            self.expect_newline();
        } else {
            let s = self.span();
            self.error(s, "expected 'end if'");
        }
        let id = self.id();
        Some(Stmt::If { cond, then_body, else_body, span, id })
    }

    fn call_stmt(&mut self) -> Option<Stmt> {
        let span = self.span();
        self.bump(); // 'call'
        let (base, base_span) = self.ident("routine or receiver name")?;
        let callee = if matches!(self.peek(), Tok::Percent) {
            self.bump();
            let (method, _) = self.ident("method name")?;
            let id = self.id();
            Callee::Method {
                recv: Designator { base, parts: Vec::new(), span: base_span, id },
                method,
            }
        } else {
            Callee::Named(base)
        };
        if !self.expect(Tok::LParen, "'('") {
            self.skip_line();
            return None;
        }
        let mut args = Vec::new();
        if !matches!(self.peek(), Tok::RParen) {
            loop {
                args.push(self.expr()?);
                if matches!(self.peek(), Tok::Comma) {
                    self.bump();
                } else {
                    break;
                }
            }
        }
        self.expect(Tok::RParen, "')'");
        self.expect_newline();
        let id = self.id();
        Some(Stmt::Call { callee, args, span, id })
    }

    // ---- expressions -------------------------------------------------

    fn designator(&mut self) -> Option<Designator> {
        let (base, span) = self.ident("variable name")?;
        let mut parts = Vec::new();
        loop {
            match self.peek() {
                Tok::Percent => {
                    self.bump();
                    let (f, _) = self.ident("field name")?;
                    parts.push(DesigPart::Field(f));
                }
                Tok::LParen => {
                    self.bump();
                    let mut idx = Vec::new();
                    if !matches!(self.peek(), Tok::RParen) {
                        loop {
                            idx.push(self.expr()?);
                            if matches!(self.peek(), Tok::Comma) {
                                self.bump();
                            } else {
                                break;
                            }
                        }
                    }
                    self.expect(Tok::RParen, "')'");
                    parts.push(DesigPart::Index(idx));
                }
                _ => break,
            }
        }
        let id = self.id();
        Some(Designator { base, parts, span, id })
    }

    fn expr(&mut self) -> Option<Expr> {
        self.or_expr()
    }

    fn or_expr(&mut self) -> Option<Expr> {
        let mut lhs = self.and_expr()?;
        while matches!(self.peek(), Tok::Kw(Kw::Or)) {
            let span = self.span();
            self.bump();
            let rhs = self.and_expr()?;
            let id = self.id();
            lhs = Expr::Binary { op: BinOp::Or, lhs: Box::new(lhs), rhs: Box::new(rhs), span, id };
        }
        Some(lhs)
    }

    fn and_expr(&mut self) -> Option<Expr> {
        let mut lhs = self.not_expr()?;
        while matches!(self.peek(), Tok::Kw(Kw::And)) {
            let span = self.span();
            self.bump();
            let rhs = self.not_expr()?;
            let id = self.id();
            lhs = Expr::Binary { op: BinOp::And, lhs: Box::new(lhs), rhs: Box::new(rhs), span, id };
        }
        Some(lhs)
    }

    fn not_expr(&mut self) -> Option<Expr> {
        if matches!(self.peek(), Tok::Kw(Kw::Not)) {
            let span = self.span();
            self.bump();
            let e = self.not_expr()?;
            let id = self.id();
            return Some(Expr::Unary { op: UnOp::Not, expr: Box::new(e), span, id });
        }
        self.comparison()
    }

    fn comparison(&mut self) -> Option<Expr> {
        let lhs = self.add_expr()?;
        let op = match self.peek() {
            Tok::EqEq => Some(BinOp::Eq),
            Tok::Ne => Some(BinOp::Ne),
            Tok::Lt => Some(BinOp::Lt),
            Tok::Le => Some(BinOp::Le),
            Tok::Gt => Some(BinOp::Gt),
            Tok::Ge => Some(BinOp::Ge),
            _ => None,
        };
        if let Some(op) = op {
            let span = self.span();
            self.bump();
            let rhs = self.add_expr()?;
            let id = self.id();
            return Some(Expr::Binary { op, lhs: Box::new(lhs), rhs: Box::new(rhs), span, id });
        }
        Some(lhs)
    }

    fn add_expr(&mut self) -> Option<Expr> {
        let mut lhs = self.mul_expr()?;
        loop {
            let op = match self.peek() {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => break,
            };
            let span = self.span();
            self.bump();
            let rhs = self.mul_expr()?;
            let id = self.id();
            lhs = Expr::Binary { op, lhs: Box::new(lhs), rhs: Box::new(rhs), span, id };
        }
        Some(lhs)
    }

    fn mul_expr(&mut self) -> Option<Expr> {
        let mut lhs = self.unary_expr()?;
        loop {
            let op = match self.peek() {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                Tok::Kw(Kw::Mod) => BinOp::Mod,
                _ => break,
            };
            let span = self.span();
            self.bump();
            let rhs = self.unary_expr()?;
            let id = self.id();
            lhs = Expr::Binary { op, lhs: Box::new(lhs), rhs: Box::new(rhs), span, id };
        }
        Some(lhs)
    }

    fn unary_expr(&mut self) -> Option<Expr> {
        if matches!(self.peek(), Tok::Minus) {
            let span = self.span();
            self.bump();
            let e = self.unary_expr()?;
            let id = self.id();
            return Some(Expr::Unary { op: UnOp::Neg, expr: Box::new(e), span, id });
        }
        self.primary()
    }

    fn primary(&mut self) -> Option<Expr> {
        match self.peek().clone() {
            Tok::Int(v) => {
                let span = self.span();
                self.bump();
                let id = self.id();
                Some(Expr::Int(v, span, id))
            }
            Tok::Float(v) => {
                let span = self.span();
                self.bump();
                let id = self.id();
                Some(Expr::Float(v, span, id))
            }
            Tok::LParen => {
                self.bump();
                let e = self.expr()?;
                self.expect(Tok::RParen, "')'");
                Some(e)
            }
            Tok::Kw(Kw::Handle) => {
                let span = self.span();
                self.bump();
                self.expect(Tok::LParen, "'('");
                let (routine, _) = self.ident("routine name")?;
                self.expect(Tok::RParen, "')'");
                let id = self.id();
                Some(Expr::HandleOf { routine, span, id })
            }
            Tok::Ident(_) => Some(Expr::Desig(self.designator()?)),
            _ => {
                let span = self.span();
                let desc = self.current().describe();
                self.error(span, format!("expected an expression, found {desc}"));
                self.skip_line();
                None
            }
        }
    }
}

fn contains_target(block: &Block) -> bool {
    block.iter().any(|s| match s {
        Stmt::Target { .. } => true,
        Stmt::Do { body, .. } => contains_target(body),
        Stmt::If { then_body, else_body, .. } => {
            contains_target(then_body)
                || else_body.as_ref().map(|b| contains_target(b)).unwrap_or(false)
        }
        Stmt::Master { body, .. } | Stmt::Single { body, .. } => contains_target(body),
        _ => false,
    })
}

//! Abstract syntax of SWK programs.
//!
//! The tree is deliberately small: scalar int64/float64, arrays of rank <= 3,
//! records with dynamically bound methods, routines with nested routines,
//! counted `do` loops, `if`, `call`, and the directive statements.

use crate::diag::{Diagnostic, Span};

/// Node identity assigned in parse order; semantic analysis hangs its
/// annotations off these ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub u32);

#[derive(Debug, Clone, PartialEq)]
pub struct ProgramUnit {
    pub path: String,
    pub routines: Vec<Routine>,
    pub record_types: Vec<RecordType>,
    pub globals: Vec<VarDecl>,
    pub externs: Vec<ExternDecl>,
    /// Names collected from in-source `!$o2ath entry <name>` directives.
    pub o2ath_entries: Vec<(String, Span)>,
    pub diagnostics: Vec<Diagnostic>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Routine {
    pub name: String,
    pub params: Vec<VarDecl>,
    pub body: Block,
    /// Routines nested inside this one (trampolines).
    pub nested: Vec<Routine>,
    pub attributes: RoutineAttrs,
    /// Set when this routine is a method of a record type.
    pub is_virtual_method_of: Option<String>,
    pub span: Span,
    pub id: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RoutineAttrs {
    pub declare_target: bool,
    /// Attached only by the outlining pass, never written by users.
    pub target_entrypoint: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExternDecl {
    pub name: String,
    pub params: Vec<VarDecl>,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordType {
    pub name: String,
    pub parent: Option<String>,
    pub fields: Vec<VarDecl>,
    /// All methods are dynamically bound.
    pub methods: Vec<Routine>,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarDecl {
    pub name: String,
    pub ty: Type,
    pub storage: Storage,
    pub span: Span,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Storage {
    Global,
    Local,
    Param,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Type {
    Int64,
    Float64,
    Array(ScalarTy, ArrayShape),
    Record(String),
    RoutineHandle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ScalarTy {
    Int64,
    Float64,
}

/// Column-major shape; lower bounds default to 1. Deferred extents are only
/// legal on parameters (the callee receives a descriptor).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArrayShape {
    pub extents: Vec<Extent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Extent {
    Fixed { lb: i64, ub: i64 },
    Deferred,
}

impl ArrayShape {
    pub fn rank(&self) -> usize {
        self.extents.len()
    }

    pub fn is_fixed(&self) -> bool {
        self.extents.iter().all(|e| matches!(e, Extent::Fixed { .. }))
    }

    /// Total element count for fully fixed shapes.
    pub fn elem_count(&self) -> Option<i64> {
        let mut n: i64 = 1;
        for e in &self.extents {
            match e {
                Extent::Fixed { lb, ub } => n *= (ub - lb + 1).max(0),
                Extent::Deferred => return None,
            }
        }
        Some(n)
    }
}

impl Type {
    pub fn scalar(&self) -> Option<ScalarTy> {
        match self {
            Type::Int64 => Some(ScalarTy::Int64),
            Type::Float64 => Some(ScalarTy::Float64),
            _ => None,
        }
    }

    pub fn display(&self) -> String {
        match self {
            Type::Int64 => "int64".into(),
            Type::Float64 => "float64".into(),
            Type::Array(elem, shape) => {
                let elem = match elem {
                    ScalarTy::Int64 => "int64",
                    ScalarTy::Float64 => "float64",
                };
                let exts: Vec<String> = shape
                    .extents
                    .iter()
                    .map(|e| match e {
                        Extent::Fixed { lb: 1, ub } => format!("{ub}"),
                        Extent::Fixed { lb, ub } => format!("{lb}:{ub}"),
                        Extent::Deferred => ":".into(),
                    })
                    .collect();
                format!("array({elem}, {})", exts.join(", "))
            }
            Type::Record(name) => name.clone(),
            Type::RoutineHandle => "routine_handle".into(),
        }
    }
}

pub type Block = Vec<Stmt>;

#[derive(Debug, Clone, PartialEq)]
pub enum Stmt {
    Local(VarDecl),
    Assign { target: Designator, value: Expr, span: Span, id: NodeId },
    Do { var: String, var_span: Span, from: Expr, to: Expr, step: Option<Expr>, body: Block, span: Span, id: NodeId },
    If { cond: Expr, then_body: Block, else_body: Option<Block>, span: Span, id: NodeId },
    Call { callee: Callee, args: Vec<Expr>, span: Span, id: NodeId },
    Return { span: Span },
    /// `!$omp target [private(...)] [device(n)]` ... `!$omp end target`
    Target {
        body: Block,
        private: Vec<(String, Span)>,
        device: i64,
        span: Span,
        end_span: Span,
        id: NodeId,
    },
    Master { body: Block, span: Span, end_span: Span, id: NodeId },
    Single { body: Block, span: Span, end_span: Span, id: NodeId },
    Barrier { span: Span, id: NodeId },
    CriticalEnter { span: Span, id: NodeId },
    CriticalExit { span: Span, id: NodeId },
    /// Produced by the outlining pass in place of a target region: builds the
    /// capture record and hands the task to the runtime. Never parsed.
    DispatchSite {
        entry: String,
        device: i64,
        captured: Vec<CapturedVar>,
        span: Span,
        id: NodeId,
    },
}

/// One captured variable of an outlined region, resolved against the scope
/// chain of the dispatch site.
#[derive(Debug, Clone, PartialEq)]
pub struct CapturedVar {
    pub name: String,
    /// Lexical hops from the dispatching routine up to the owner frame
    /// (0 = the routine containing the dispatch site).
    pub hops: u8,
    pub ty: Type,
    pub mode: CaptureMode,
    pub offset: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaptureMode {
    ByValue,
    ByAddress,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Callee {
    Named(String),
    /// `call recv%method(...)`: dynamically bound unless devirtualized.
    Method { recv: Designator, method: String },
    /// Produced by devirtualization: direct call to `record`'s `method`.
    DirectMethod { recv: Designator, record: String, method: String },
}

/// A variable reference with optional field/index selections:
/// `x`, `a(i, j)`, `r%f`, `r%arr(i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Designator {
    pub base: String,
    pub parts: Vec<DesigPart>,
    pub span: Span,
    pub id: NodeId,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DesigPart {
    Field(String),
    Index(Vec<Expr>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Int(i64, Span, NodeId),
    Float(f64, Span, NodeId),
    Desig(Designator),
    Unary { op: UnOp, expr: Box<Expr>, span: Span, id: NodeId },
    Binary { op: BinOp, lhs: Box<Expr>, rhs: Box<Expr>, span: Span, id: NodeId },
    /// `handle(name)`: first-class handle to a device routine.
    HandleOf { routine: String, span: Span, id: NodeId },
}

impl Expr {
    pub fn span(&self) -> Span {
        match self {
            Expr::Int(_, s, _) | Expr::Float(_, s, _) => *s,
            Expr::Desig(d) => d.span,
            Expr::Unary { span, .. } | Expr::Binary { span, .. } | Expr::HandleOf { span, .. } => {
                *span
            }
        }
    }

    pub fn id(&self) -> NodeId {
        match self {
            Expr::Int(_, _, id) | Expr::Float(_, _, id) => *id,
            Expr::Desig(d) => d.id,
            Expr::Unary { id, .. } | Expr::Binary { id, .. } | Expr::HandleOf { id, .. } => *id,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnOp {
    Neg,
    Not,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Mod,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    And,
    Or,
}

impl BinOp {
    pub fn is_comparison(self) -> bool {
        matches!(self, BinOp::Eq | BinOp::Ne | BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge)
    }

    pub fn is_logical(self) -> bool {
        matches!(self, BinOp::And | BinOp::Or)
    }

    pub fn text(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Mod => "mod",
            BinOp::Eq => "==",
            BinOp::Ne => "/=",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
            BinOp::And => "and",
            BinOp::Or => "or",
        }
    }
}

/// Zero out all spans so two units can be compared structurally.
pub fn strip_spans(unit: &mut ProgramUnit) {
    for r in &mut unit.routines {
        strip_routine(r);
    }
    for rec in &mut unit.record_types {
        rec.span = Span::default();
        for f in &mut rec.fields {
            f.span = Span::default();
        }
        for m in &mut rec.methods {
            strip_routine(m);
        }
    }
    for g in &mut unit.globals {
        g.span = Span::default();
    }
    for e in &mut unit.externs {
        e.span = Span::default();
        for p in &mut e.params {
            p.span = Span::default();
        }
    }
    for (_, s) in &mut unit.o2ath_entries {
        *s = Span::default();
    }
}

fn strip_routine(r: &mut Routine) {
    r.span = Span::default();
    for p in &mut r.params {
        p.span = Span::default();
    }
    strip_block(&mut r.body);
    for n in &mut r.nested {
        strip_routine(n);
    }
}

fn strip_block(block: &mut Block) {
    for s in block {
        strip_stmt(s);
    }
}

fn strip_stmt(stmt: &mut Stmt) {
    match stmt {
        Stmt::Local(v) => v.span = Span::default(),
        Stmt::Assign { target, value, span, .. } => {
            strip_desig(target);
            strip_expr(value);
            *span = Span::default();
        }
        Stmt::Do { var_span, from, to, step, body, span, .. } => {
            *var_span = Span::default();
            strip_expr(from);
            strip_expr(to);
            if let Some(s) = step {
                strip_expr(s);
            }
            strip_block(body);
            *span = Span::default();
        }
        Stmt::If { cond, then_body, else_body, span, .. } => {
            strip_expr(cond);
            strip_block(then_body);
            if let Some(b) = else_body {
                strip_block(b);
            }
            *span = Span::default();
        }
        Stmt::Call { callee, args, span, .. } => {
            match callee {
                Callee::Named(_) => {}
                Callee::Method { recv, .. } | Callee::DirectMethod { recv, .. } => {
                    strip_desig(recv)
                }
            }
            for a in args {
                strip_expr(a);
            }
            *span = Span::default();
        }
        Stmt::Return { span } => *span = Span::default(),
        Stmt::Target { body, private, span, end_span, .. } => {
            strip_block(body);
            for (_, s) in private {
                *s = Span::default();
            }
            *span = Span::default();
            *end_span = Span::default();
        }
        Stmt::Master { body, span, end_span, .. } | Stmt::Single { body, span, end_span, .. } => {
            strip_block(body);
            *span = Span::default();
            *end_span = Span::default();
        }
        Stmt::Barrier { span, .. }
        | Stmt::CriticalEnter { span, .. }
        | Stmt::CriticalExit { span, .. } => *span = Span::default(),
        Stmt::DispatchSite { span, .. } => *span = Span::default(),
    }
}

fn strip_desig(d: &mut Designator) {
    d.span = Span::default();
    for p in &mut d.parts {
        if let DesigPart::Index(idx) = p {
            for e in idx {
                strip_expr(e);
            }
        }
    }
}

fn strip_expr(e: &mut Expr) {
    match e {
        Expr::Int(_, s, _) | Expr::Float(_, s, _) => *s = Span::default(),
        Expr::Desig(d) => strip_desig(d),
        Expr::Unary { expr, span, .. } => {
            strip_expr(expr);
            *span = Span::default();
        }
        Expr::Binary { lhs, rhs, span, .. } => {
            strip_expr(lhs);
            strip_expr(rhs);
            *span = Span::default();
        }
        Expr::HandleOf { span, .. } => *span = Span::default(),
    }
}

/// Reassign fresh sequential ids to every node. Pass transforms clone
/// subtrees, so a transformed unit is renumbered before revalidation.
pub fn renumber_unit(unit: &mut ProgramUnit) {
    let mut next = 0u32;
    let mut fresh = move || {
        next += 1;
        NodeId(next)
    };
    for r in &mut unit.routines {
        renumber_routine(r, &mut fresh);
    }
    for rec in &mut unit.record_types {
        for m in &mut rec.methods {
            renumber_routine(m, &mut fresh);
        }
    }
}

fn renumber_routine(r: &mut Routine, fresh: &mut impl FnMut() -> NodeId) {
    r.id = fresh();
    renumber_block(&mut r.body, fresh);
    for n in &mut r.nested {
        renumber_routine(n, fresh);
    }
}

fn renumber_block(block: &mut Block, fresh: &mut impl FnMut() -> NodeId) {
    for s in block {
        renumber_stmt(s, fresh);
    }
}

fn renumber_stmt(stmt: &mut Stmt, fresh: &mut impl FnMut() -> NodeId) {
    match stmt {
        Stmt::Local(_) => {}
        Stmt::Assign { target, value, id, .. } => {
            renumber_desig(target, fresh);
            renumber_expr(value, fresh);
            *id = fresh();
        }
        Stmt::Do { from, to, step, body, id, .. } => {
            renumber_expr(from, fresh);
            renumber_expr(to, fresh);
            if let Some(s) = step {
                renumber_expr(s, fresh);
            }
            renumber_block(body, fresh);
            *id = fresh();
        }
        Stmt::If { cond, then_body, else_body, id, .. } => {
            renumber_expr(cond, fresh);
            renumber_block(then_body, fresh);
            if let Some(b) = else_body {
                renumber_block(b, fresh);
            }
            *id = fresh();
        }
        Stmt::Call { callee, args, id, .. } => {
            match callee {
                Callee::Named(_) => {}
                Callee::Method { recv, .. } | Callee::DirectMethod { recv, .. } => {
                    renumber_desig(recv, fresh)
                }
            }
            for a in args {
                renumber_expr(a, fresh);
            }
            *id = fresh();
        }
        Stmt::Return { .. } => {}
        Stmt::Target { body, id, .. } => {
            renumber_block(body, fresh);
            *id = fresh();
        }
        Stmt::Master { body, id, .. } | Stmt::Single { body, id, .. } => {
            renumber_block(body, fresh);
            *id = fresh();
        }
        Stmt::Barrier { id, .. } | Stmt::CriticalEnter { id, .. } | Stmt::CriticalExit { id, .. } => {
            *id = fresh();
        }
        Stmt::DispatchSite { id, .. } => *id = fresh(),
    }
}

fn renumber_desig(d: &mut Designator, fresh: &mut impl FnMut() -> NodeId) {
    d.id = fresh();
    for p in &mut d.parts {
        if let DesigPart::Index(idx) = p {
            for e in idx {
                renumber_expr(e, fresh);
            }
        }
    }
}

fn renumber_expr(e: &mut Expr, fresh: &mut impl FnMut() -> NodeId) {
    match e {
        Expr::Int(_, _, id) | Expr::Float(_, _, id) => *id = fresh(),
        Expr::Desig(d) => renumber_desig(d, fresh),
        Expr::Unary { expr, id, .. } => {
            renumber_expr(expr, fresh);
            *id = fresh();
        }
        Expr::Binary { lhs, rhs, id, .. } => {
            renumber_expr(lhs, fresh);
            renumber_expr(rhs, fresh);
            *id = fresh();
        }
        Expr::HandleOf { id, .. } => *id = fresh(),
    }
}

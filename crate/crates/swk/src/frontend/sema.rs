//! Name resolution and type checking.
//!
//! `validate` is pure: it never mutates the unit, so running it twice yields
//! the same result. All annotations are keyed by `NodeId` in the returned
//! `SemaInfo`.

use std::collections::HashMap;

use super::ast::*;
use crate::diag::{Diagnostic, Span};

#[derive(Debug, Clone, PartialEq)]
pub struct TypedUnit {
    pub unit: ProgramUnit,
    pub info: SemaInfo,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SemaInfo {
    pub expr_ty: HashMap<NodeId, Type>,
    pub desig: HashMap<NodeId, DesigInfo>,
    pub calls: HashMap<NodeId, CallInfo>,
    pub records: Vec<RecordInfo>,
    pub record_index: HashMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesigInfo {
    pub binding: Binding,
    /// Type of the full designator (after applying field/index parts).
    pub ty: Type,
    /// Type of the base variable.
    pub base_ty: Type,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Binding {
    Global(u32),
    /// `var` local (including region-locals and privates), `hops` scope
    /// levels up from the innermost scope. Target regions count as a level.
    Local { hops: u8 },
    Param { hops: u8 },
    /// Bare routine name used as a spawn target.
    Routine(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CallInfo {
    pub kind: CallKind,
    /// For `spawn(f, p)` with a bare routine name as first argument.
    pub spawn_target: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CallKind {
    TopLevel(String),
    Extern(String),
    /// Call to a routine nested in an enclosing scope. `hops` is the number
    /// of scope levels from the call site up to the frame of the *parent*
    /// routine of the callee.
    Nested { hops: u8, name: String },
    /// Dynamically bound method call; `record` is the receiver's static type.
    Method { record: String, method: String },
    /// Statically bound after devirtualization.
    DirectMethod { record: String, method: String },
    Intrinsic(Intrinsic),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Intrinsic {
    GetCoreid,
    GetVnestid,
    Spawn,
    Join,
    ReadInt64,
    PrintInt64,
    PrintFloat64,
}

impl Intrinsic {
    pub fn from_name(name: &str) -> Option<Intrinsic> {
        Some(match name {
            "get_coreid" => Intrinsic::GetCoreid,
            "get_vnestid" => Intrinsic::GetVnestid,
            "spawn" => Intrinsic::Spawn,
            "join" => Intrinsic::Join,
            "read_int64" => Intrinsic::ReadInt64,
            "print_int64" => Intrinsic::PrintInt64,
            "print_float64" => Intrinsic::PrintFloat64,
            _ => return None,
        })
    }

    /// Intrinsics that may only run on the host core.
    pub fn host_only(self) -> bool {
        matches!(
            self,
            Intrinsic::Spawn
                | Intrinsic::Join
                | Intrinsic::ReadInt64
                | Intrinsic::PrintInt64
                | Intrinsic::PrintFloat64
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordInfo {
    pub name: String,
    pub parent: Option<usize>,
    /// Flattened fields, inherited first, as (name, type).
    pub fields: Vec<(String, Type)>,
    pub own_methods: Vec<String>,
}

/// Resolve `method` starting at record `idx`, walking up the hierarchy.
/// Returns the index of the defining record.
pub fn resolve_method(records: &[RecordInfo], idx: usize, method: &str) -> Option<usize> {
    let mut cur = Some(idx);
    while let Some(i) = cur {
        if records[i].own_methods.iter().any(|m| m == method) {
            return Some(i);
        }
        cur = records[i].parent;
    }
    None
}

/// Is `sub` the same record as `base` or a descendant of it?
pub fn is_subrecord(records: &[RecordInfo], sub: usize, base: usize) -> bool {
    let mut cur = Some(sub);
    while let Some(i) = cur {
        if i == base {
            return true;
        }
        cur = records[i].parent;
    }
    false
}

#[derive(Debug, Clone, Copy)]
pub struct ValidateOpts {
    pub require_main: bool,
}

impl Default for ValidateOpts {
    fn default() -> Self {
        ValidateOpts { require_main: true }
    }
}

pub fn validate(unit: ProgramUnit) -> Result<TypedUnit, Vec<Diagnostic>> {
    validate_with(unit, ValidateOpts::default())
}

pub fn validate_with(unit: ProgramUnit, opts: ValidateOpts) -> Result<TypedUnit, Vec<Diagnostic>> {
    let mut cx = Checker {
        file: unit.path.clone(),
        diags: unit.diagnostics.clone(),
        info: SemaInfo::default(),
        globals: Vec::new(),
        routine_sigs: HashMap::new(),
        extern_sigs: HashMap::new(),
        method_sigs: HashMap::new(),
        scopes: Vec::new(),
        in_region: false,
    };
    cx.collect_records(&unit);
    cx.collect_toplevel(&unit, opts);
    for r in &unit.routines {
        cx.check_routine(r, None);
    }
    for rec in &unit.record_types {
        for m in &rec.methods {
            cx.check_routine(m, Some(&rec.name));
        }
    }
    for (name, span) in &unit.o2ath_entries {
        if !cx.routine_sigs.contains_key(name.as_str()) {
            cx.diags.push(Diagnostic::error(
                &cx.file,
                *span,
                format!("unknown routine '{name}' named by !$o2ath entry"),
            ));
        }
    }
    if crate::diag::has_errors(&cx.diags) {
        Err(cx.diags)
    } else {
        let mut unit = unit;
        unit.diagnostics = cx.diags;
        Ok(TypedUnit { unit, info: cx.info })
    }
}

struct ScopeVar {
    name: String,
    ty: Type,
    is_param: bool,
}

struct Scope {
    vars: Vec<ScopeVar>,
    /// Signatures of routines nested directly in this scope's routine.
    nested: Vec<(String, Vec<Type>)>,
    is_region: bool,
}

struct Checker {
    file: String,
    diags: Vec<Diagnostic>,
    info: SemaInfo,
    globals: Vec<(String, Type)>,
    routine_sigs: HashMap<String, Vec<Type>>,
    extern_sigs: HashMap<String, Vec<Type>>,
    method_sigs: HashMap<(String, String), Vec<Type>>,
    scopes: Vec<Scope>,
    in_region: bool,
}

impl Checker {
    fn err(&mut self, span: Span, msg: impl Into<String>) {
        self.diags.push(Diagnostic::error(&self.file, span, msg));
    }

    fn collect_records(&mut self, unit: &ProgramUnit) {
        let mut index = HashMap::new();
        for (i, r) in unit.record_types.iter().enumerate() {
            if index.insert(r.name.clone(), i).is_some() {
                self.err(r.span, format!("duplicate record type '{}'", r.name));
            }
        }
        let mut infos: Vec<RecordInfo> = Vec::new();
        for r in &unit.record_types {
            let parent = match &r.parent {
                Some(p) => match index.get(p) {
                    Some(&pi) => Some(pi),
                    None => {
                        self.err(r.span, format!("unknown parent record '{p}'"));
                        None
                    }
                },
                None => None,
            };
            let mut own_methods = Vec::new();
            for m in &r.methods {
                if own_methods.contains(&m.name) {
                    self.err(m.span, format!("duplicate method '{}' in record '{}'", m.name, r.name));
                }
                own_methods.push(m.name.clone());
                self.method_sigs.insert(
                    (r.name.clone(), m.name.clone()),
                    m.params.iter().map(|p| p.ty.clone()).collect(),
                );
            }
            infos.push(RecordInfo { name: r.name.clone(), parent, fields: Vec::new(), own_methods });
        }
        // cycle check
        for start in 0..infos.len() {
            let mut cur = infos[start].parent;
            let mut steps = 0;
            while let Some(p) = cur {
                steps += 1;
                if steps > infos.len() {
                    self.err(unit.record_types[start].span, "record inheritance cycle");
                    infos[start].parent = None;
                    break;
                }
                cur = infos[p].parent;
            }
        }
        // flatten fields base-first
        fn flatten(i: usize, unit: &ProgramUnit, infos: &[RecordInfo], out: &mut Vec<(String, Type)>) {
            if let Some(p) = infos[i].parent {
                flatten(p, unit, infos, out);
            }
            for f in &unit.record_types[i].fields {
                out.push((f.name.clone(), f.ty.clone()));
            }
        }
        for i in 0..infos.len() {
            let mut fields = Vec::new();
            flatten(i, unit, &infos, &mut fields);
            for (a, f) in fields.iter().enumerate() {
                if fields[..a].iter().any(|(n, _)| n == &f.0) {
                    self.err(
                        unit.record_types[i].span,
                        format!("duplicate field '{}' in record '{}'", f.0, infos[i].name),
                    );
                }
            }
            infos[i].fields = fields;
        }
        for r in &unit.record_types {
            for f in &r.fields {
                match &f.ty {
                    Type::Int64 | Type::Float64 => {}
                    Type::Array(_, shape) if shape.is_fixed() => {}
                    Type::Array(..) => self.err(f.span, "record array fields must have fixed extents"),
                    Type::Record(_) => self.err(f.span, "record fields may not be records"),
                    Type::RoutineHandle => self.err(f.span, "record fields may not be routine handles"),
                }
            }
        }
        self.info.record_index = index;
        self.info.records = infos;
    }

    fn collect_toplevel(&mut self, unit: &ProgramUnit, opts: ValidateOpts) {
        for g in &unit.globals {
            if self.globals.iter().any(|(n, _)| n == &g.name) {
                self.err(g.span, format!("duplicate global '{}'", g.name));
            }
            self.check_decl_type(g, false);
            self.globals.push((g.name.clone(), g.ty.clone()));
        }
        for r in &unit.routines {
            if Intrinsic::from_name(&r.name).is_some() {
                self.err(r.span, format!("routine '{}' redefines an intrinsic", r.name));
            }
            let sig: Vec<Type> = r.params.iter().map(|p| p.ty.clone()).collect();
            if self.routine_sigs.insert(r.name.clone(), sig).is_some() {
                self.err(r.span, format!("duplicate routine '{}'", r.name));
            }
        }
        for e in &unit.externs {
            if self.routine_sigs.contains_key(&e.name) {
                self.err(e.span, format!("extern '{}' conflicts with a routine definition", e.name));
            }
            for p in &e.params {
                if matches!(p.ty, Type::Record(_)) {
                    self.err(p.span, "extern routine parameters may not be records");
                }
            }
            let sig: Vec<Type> = e.params.iter().map(|p| p.ty.clone()).collect();
            if self.extern_sigs.insert(e.name.clone(), sig).is_some() {
                self.err(e.span, format!("duplicate extern '{}'", e.name));
            }
        }
        if opts.require_main {
            match unit.routines.iter().find(|r| r.name == "main") {
                None => self.err(Span::point(1, 1), "no routine named 'main'"),
                Some(m) => {
                    if !m.params.is_empty() {
                        self.err(m.span, "'main' must take no parameters");
                    }
                    if m.attributes.declare_target {
                        self.err(m.span, "'main' may not be marked declare target");
                    }
                }
            }
        }
    }

    fn check_decl_type(&mut self, v: &VarDecl, allow_deferred: bool) {
        match &v.ty {
            Type::Array(_, shape) => {
                for e in &shape.extents {
                    match e {
                        Extent::Fixed { lb, ub } => {
                            if ub < lb {
                                self.err(v.span, format!("array extent {lb}:{ub} is empty"));
                            }
                        }
                        Extent::Deferred if !allow_deferred => {
                            self.err(v.span, "deferred extents are only legal on parameters");
                        }
                        Extent::Deferred => {}
                    }
                }
                let has_deferred = shape.extents.iter().any(|e| matches!(e, Extent::Deferred));
                if has_deferred && !shape.extents.iter().all(|e| matches!(e, Extent::Deferred)) {
                    self.err(v.span, "array extents must be all fixed or all deferred");
                }
            }
            Type::Record(name) => {
                if !self.info.record_index.contains_key(name) {
                    self.err(v.span, format!("unknown record type '{name}'"));
                }
            }
            _ => {}
        }
    }

    fn check_routine(&mut self, r: &Routine, method_of: Option<&str>) {
        let mut scope = Scope { vars: Vec::new(), nested: Vec::new(), is_region: false };
        if let Some(rec) = method_of.or(r.is_virtual_method_of.as_deref()) {
            scope.vars.push(ScopeVar {
                name: "self".into(),
                ty: Type::Record(rec.to_string()),
                is_param: true,
            });
        }
        for p in &r.params {
            self.check_decl_type(p, true);
            if scope.vars.iter().any(|v| v.name == p.name) {
                self.err(p.span, format!("duplicate parameter '{}'", p.name));
            }
            scope.vars.push(ScopeVar { name: p.name.clone(), ty: p.ty.clone(), is_param: true });
        }
        for n in &r.nested {
            if scope.nested.iter().any(|(x, _)| x == &n.name) {
                self.err(n.span, format!("duplicate nested routine '{}'", n.name));
            }
            scope.nested.push((n.name.clone(), n.params.iter().map(|p| p.ty.clone()).collect()));
        }
        self.scopes.push(scope);
        self.check_block(&r.body, true);
        for n in &r.nested {
            if n.attributes.declare_target {
                self.err(n.span, "nested routines may not be marked declare target");
            }
            self.check_routine(n, None);
        }
        self.scopes.pop();
    }

    fn declare_local(&mut self, v: &VarDecl) {
        self.check_decl_type(v, false);
        let dup = {
            let scope = self.scopes.last().expect("scope");
            scope.vars.iter().any(|sv| sv.name == v.name)
        };
        if dup {
            self.err(v.span, format!("duplicate declaration of '{}'", v.name));
            return;
        }
        self.scopes.last_mut().unwrap().vars.push(ScopeVar {
            name: v.name.clone(),
            ty: v.ty.clone(),
            is_param: false,
        });
    }

    fn check_block(&mut self, block: &Block, decls_allowed: bool) {
        for s in block {
            self.check_stmt(s, decls_allowed);
        }
    }

    fn check_stmt(&mut self, s: &Stmt, decls_allowed: bool) {
        match s {
            Stmt::Local(v) => {
                if !decls_allowed {
                    self.err(
                        v.span,
                        "declarations are only allowed at routine body level or directly inside a target region",
                    );
                }
                self.declare_local(v);
            }
            Stmt::Assign { target, value, span, .. } => {
                let tty = self.desig_type(target);
                let vty = self.expr_type(value);
                if let (Some(t), Some(v)) = (&tty, &vty) {
                    let ok = matches!(
                        (t, v),
                        (Type::Int64, Type::Int64)
                            | (Type::Float64, Type::Float64)
                            | (Type::Float64, Type::Int64)
                            | (Type::RoutineHandle, Type::RoutineHandle)
                    );
                    if !ok {
                        self.err(
                            *span,
                            format!("type mismatch: cannot assign {} to {}", v.display(), t.display()),
                        );
                    }
                }
            }
            Stmt::Do { var, var_span, from, to, step, body, .. } => {
                match self.resolve_var(var) {
                    Some((_, ty)) => {
                        if ty != Type::Int64 {
                            self.err(*var_span, format!("loop variable '{var}' must be int64"));
                        }
                    }
                    None => self.err(*var_span, format!("undefined name '{var}'")),
                }
                for (what, e) in [("start", Some(from)), ("end", Some(to)), ("step", step.as_ref())] {
                    if let Some(e) = e {
                        if let Some(t) = self.expr_type(e) {
                            if t != Type::Int64 {
                                self.err(
                                    e.span(),
                                    format!("loop {what} expression must be int64, got {}", t.display()),
                                );
                            }
                        }
                    }
                }
                self.check_block(body, false);
            }
            Stmt::If { cond, then_body, else_body, .. } => {
                if let Some(t) = self.expr_type(cond) {
                    if t != Type::Int64 {
                        self.err(cond.span(), "condition must be int64 (0 = false)");
                    }
                }
                self.check_block(then_body, false);
                if let Some(b) = else_body {
                    self.check_block(b, false);
                }
            }
            Stmt::Call { callee, args, span, id } => self.check_call(callee, args, *span, *id),
            Stmt::Return { span } => {
                if self.in_region {
                    self.err(*span, "return may not branch out of a target region");
                }
            }
            Stmt::Target { body, private, device, span, .. } => {
                if self.in_region || self.scopes.iter().any(|s| s.is_region) {
                    self.err(*span, "nesting error: a target region may not contain another target region");
                }
                if *device != 0 && *device != 1 {
                    self.err(*span, format!("device({device}) is out of range; only devices 0 and 1 exist"));
                }
                let mut scope = Scope { vars: Vec::new(), nested: Vec::new(), is_region: true };
                for (name, pspan) in private {
                    match self.resolve_var(name) {
                        Some((_, ty)) => match ty {
                            Type::Int64 | Type::Float64 => {
                                if scope.vars.iter().any(|v| v.name == *name) {
                                    self.err(*pspan, format!("'{name}' listed twice in private clause"));
                                } else {
                                    scope.vars.push(ScopeVar { name: name.clone(), ty, is_param: false });
                                }
                            }
                            Type::Array(..) => self.err(
                                *pspan,
                                format!("private arrays are not supported; '{name}' must be a scalar"),
                            ),
                            other => self.err(
                                *pspan,
                                format!("private variable '{name}' must be a scalar, got {}", other.display()),
                            ),
                        },
                        None => {
                            if self.routine_sigs.contains_key(name) || self.extern_sigs.contains_key(name) {
                                self.err(*pspan, format!("'{name}' in private clause is not a variable"));
                            } else {
                                self.err(*pspan, format!("undefined name '{name}'"));
                            }
                        }
                    }
                }
                self.scopes.push(scope);
                let was = self.in_region;
                self.in_region = true;
                self.check_block(body, true);
                self.in_region = was;
                self.scopes.pop();
            }
            Stmt::Master { body, .. } | Stmt::Single { body, .. } => {
                self.check_block(body, false);
            }
            Stmt::Barrier { .. } | Stmt::CriticalEnter { .. } | Stmt::CriticalExit { .. } => {}
            Stmt::DispatchSite { .. } => {}
        }
    }

    fn check_call(&mut self, callee: &Callee, args: &[Expr], span: Span, id: NodeId) {
        match callee {
            Callee::Named(name) => {
                if let Some(intr) = Intrinsic::from_name(name) {
                    self.check_intrinsic(intr, args, span, id);
                    return;
                }
                if let Some((hops, sig)) = self.find_nested(name) {
                    let sig = sig.clone();
                    self.check_args(name, &sig, args, span);
                    self.info.calls.insert(
                        id,
                        CallInfo { kind: CallKind::Nested { hops, name: name.clone() }, spawn_target: None },
                    );
                    return;
                }
                if let Some(sig) = self.routine_sigs.get(name).cloned() {
                    self.check_args(name, &sig, args, span);
                    self.info.calls.insert(
                        id,
                        CallInfo { kind: CallKind::TopLevel(name.clone()), spawn_target: None },
                    );
                    return;
                }
                if let Some(sig) = self.extern_sigs.get(name).cloned() {
                    self.check_args(name, &sig, args, span);
                    self.info.calls.insert(
                        id,
                        CallInfo { kind: CallKind::Extern(name.clone()), spawn_target: None },
                    );
                    return;
                }
                self.err(span, format!("undefined name '{name}'"));
            }
            Callee::Method { recv, method } => {
                let Some(rty) = self.desig_type(recv) else { return };
                let Type::Record(rec_name) = rty else {
                    self.err(recv.span, format!("method call receiver must be a record, got {}", rty.display()));
                    return;
                };
                let idx = self.info.record_index[&rec_name];
                match resolve_method(&self.info.records, idx, method) {
                    Some(def_idx) => {
                        let def_rec = self.info.records[def_idx].name.clone();
                        let sig = self.method_sigs[&(def_rec, method.clone())].clone();
                        self.check_args(method, &sig, args, span);
                        self.info.calls.insert(
                            id,
                            CallInfo {
                                kind: CallKind::Method { record: rec_name, method: method.clone() },
                                spawn_target: None,
                            },
                        );
                    }
                    None => self.err(
                        span,
                        format!("record '{rec_name}' has no method '{method}' (searched the hierarchy)"),
                    ),
                }
            }
            Callee::DirectMethod { record, method, .. } => {
                self.info.calls.insert(
                    id,
                    CallInfo {
                        kind: CallKind::DirectMethod { record: record.clone(), method: method.clone() },
                        spawn_target: None,
                    },
                );
                for a in args {
                    self.expr_type(a);
                }
            }
        }
    }

    /// Check argument expressions against by-reference parameter types.
    fn check_args(&mut self, name: &str, sig: &[Type], args: &[Expr], span: Span) {
        if sig.len() != args.len() {
            self.err(
                span,
                format!("'{name}' expects {} argument(s), got {}", sig.len(), args.len()),
            );
            return;
        }
        for (param_ty, arg) in sig.iter().zip(args) {
            match param_ty {
                Type::Int64 | Type::Float64 | Type::RoutineHandle => {
                    if let Some(t) = self.expr_type(arg) {
                        if &t != param_ty {
                            self.err(
                                arg.span(),
                                format!(
                                    "argument type {} does not match parameter type {}",
                                    t.display(),
                                    param_ty.display()
                                ),
                            );
                        }
                    }
                }
                Type::Array(elem, shape) => match arg {
                    Expr::Desig(d) => {
                        if !d.parts.is_empty() {
                            self.err(d.span, "whole array arguments must be plain variables");
                            continue;
                        }
                        let Some(t) = self.desig_type(d) else { continue };
                        match t {
                            Type::Array(aelem, ashape) => {
                                if aelem != *elem {
                                    self.err(d.span, "array element type mismatch");
                                } else if ashape.rank() != shape.rank() {
                                    self.err(
                                        d.span,
                                        format!(
                                            "array rank mismatch: expected rank {}, got {}",
                                            shape.rank(),
                                            ashape.rank()
                                        ),
                                    );
                                } else if shape.is_fixed() && ashape != *shape {
                                    self.err(d.span, "array extents do not match fixed parameter shape");
                                }
                            }
                            other => self.err(
                                d.span,
                                format!("expected a whole array argument, got {}", other.display()),
                            ),
                        }
                    }
                    other => self.err(other.span(), "expected a whole array argument"),
                },
                Type::Record(want) => match arg {
                    Expr::Desig(d) => {
                        if !d.parts.is_empty() {
                            self.err(d.span, "record arguments must be plain variables");
                            continue;
                        }
                        let Some(t) = self.desig_type(d) else { continue };
                        match t {
                            Type::Record(got) => {
                                let (Some(&gi), Some(&wi)) = (
                                    self.info.record_index.get(&got),
                                    self.info.record_index.get(want),
                                ) else {
                                    continue;
                                };
                                if !is_subrecord(&self.info.records, gi, wi) {
                                    self.err(
                                        d.span,
                                        format!("record argument '{got}' is not a '{want}' (or a descendant)"),
                                    );
                                }
                            }
                            other => self.err(
                                d.span,
                                format!("expected a record argument, got {}", other.display()),
                            ),
                        }
                    }
                    other => self.err(other.span(), "expected a record variable argument"),
                },
            }
        }
    }

    fn check_intrinsic(&mut self, intr: Intrinsic, args: &[Expr], span: Span, id: NodeId) {
        let mut info = CallInfo { kind: CallKind::Intrinsic(intr), spawn_target: None };
        let arity_ok = |n: usize| args.len() == n;
        match intr {
            Intrinsic::GetCoreid => {
                if !arity_ok(1) {
                    self.err(span, "get_coreid takes exactly one int64 variable");
                } else {
                    self.require_int_lvalue(&args[0], "get_coreid argument");
                }
            }
            Intrinsic::GetVnestid => {
                if !arity_ok(5) {
                    self.err(span, "get_vnestid takes exactly five int64 variables");
                } else {
                    for a in args {
                        self.require_int_lvalue(a, "get_vnestid argument");
                    }
                }
            }
            Intrinsic::Join => {
                if !arity_ok(0) {
                    self.err(span, "join takes no arguments");
                }
            }
            Intrinsic::ReadInt64 => {
                if !arity_ok(1) {
                    self.err(span, "read_int64 takes exactly one int64 variable");
                } else {
                    self.require_int_lvalue(&args[0], "read_int64 argument");
                }
            }
            Intrinsic::PrintInt64 => {
                if !arity_ok(1) {
                    self.err(span, "print_int64 takes exactly one int64 value");
                } else if let Some(t) = self.expr_type(&args[0]) {
                    if t != Type::Int64 {
                        self.err(args[0].span(), "print_int64 expects an int64 value");
                    }
                }
            }
            Intrinsic::PrintFloat64 => {
                if !arity_ok(1) {
                    self.err(span, "print_float64 takes exactly one float64 value");
                } else if let Some(t) = self.expr_type(&args[0]) {
                    if t != Type::Float64 {
                        self.err(args[0].span(), "print_float64 expects a float64 value");
                    }
                }
            }
            Intrinsic::Spawn => {
                if !arity_ok(2) {
                    self.err(span, "spawn takes (routine-or-handle, record)");
                } else {
                    match &args[0] {
                        Expr::Desig(d)
                            if d.parts.is_empty()
                                && self.resolve_var(&d.base).is_none()
                                && (self.routine_sigs.contains_key(&d.base)
                                    || self.extern_sigs.contains_key(&d.base)) =>
                        {
                            info.spawn_target = Some(d.base.clone());
                            self.info.expr_ty.insert(d.id, Type::RoutineHandle);
                            self.info.desig.insert(
                                d.id,
                                DesigInfo {
                                    binding: Binding::Routine(d.base.clone()),
                                    ty: Type::RoutineHandle,
                                    base_ty: Type::RoutineHandle,
                                },
                            );
                        }
                        other => {
                            if let Some(t) = self.expr_type(other) {
                                if t != Type::RoutineHandle {
                                    self.err(
                                        other.span(),
                                        "spawn target must be a routine name or routine_handle",
                                    );
                                }
                            }
                        }
                    }
                    match &args[1] {
                        Expr::Desig(d) => {
                            if let Some(t) = self.desig_type(d) {
                                if !matches!(t, Type::Record(_)) {
                                    self.err(d.span, "spawn second argument must be a record variable");
                                }
                            }
                        }
                        other => self.err(other.span(), "spawn second argument must be a record variable"),
                    }
                }
            }
        }
        self.info.calls.insert(id, info);
    }

    fn require_int_lvalue(&mut self, e: &Expr, what: &str) {
        match e {
            Expr::Desig(d) => {
                if let Some(t) = self.desig_type(d) {
                    if t != Type::Int64 {
                        self.err(d.span, format!("{what} must be an int64 variable"));
                    }
                }
            }
            other => self.err(other.span(), format!("{what} must be an int64 variable")),
        }
    }

    /// Resolve a bare name against the scope stack, then globals.
    fn resolve_var(&self, name: &str) -> Option<(Binding, Type)> {
        for (hops, scope) in self.scopes.iter().rev().enumerate() {
            if let Some(v) = scope.vars.iter().find(|v| v.name == name) {
                let hops = hops as u8;
                let b = if v.is_param { Binding::Param { hops } } else { Binding::Local { hops } };
                return Some((b, v.ty.clone()));
            }
        }
        self.globals
            .iter()
            .position(|(n, _)| n == name)
            .map(|i| (Binding::Global(i as u32), self.globals[i].1.clone()))
    }

    /// Find a nested routine visible from the current scope.
    fn find_nested(&self, name: &str) -> Option<(u8, &Vec<Type>)> {
        for (hops, scope) in self.scopes.iter().rev().enumerate() {
            if let Some((_, sig)) = scope.nested.iter().find(|(n, _)| n == name) {
                return Some((hops as u8, sig));
            }
        }
        None
    }

    /// Type a designator; records the annotation.
    fn desig_type(&mut self, d: &Designator) -> Option<Type> {
        let Some((binding, base_ty)) = self.resolve_var(&d.base) else {
            let span = d.span;
            let base = d.base.clone();
            self.err(span, format!("undefined name '{base}'"));
            return None;
        };
        let mut ty = base_ty.clone();
        for part in &d.parts {
            match part {
                DesigPart::Field(f) => {
                    let Type::Record(rec_name) = &ty else {
                        self.err(d.span, format!("'%{f}' applied to non-record {}", ty.display()));
                        return None;
                    };
                    let idx = *self.info.record_index.get(rec_name)?;
                    let field_ty = self.info.records[idx]
                        .fields
                        .iter()
                        .find(|(n, _)| n == f)
                        .map(|(_, t)| t.clone());
                    match field_ty {
                        Some(t) => ty = t,
                        None => {
                            self.err(d.span, format!("record '{rec_name}' has no field '{f}'"));
                            return None;
                        }
                    }
                }
                DesigPart::Index(idx) => {
                    let Type::Array(elem, shape) = &ty else {
                        self.err(d.span, format!("indexing applied to non-array {}", ty.display()));
                        return None;
                    };
                    if idx.len() != shape.rank() {
                        self.err(
                            d.span,
                            format!("rank mismatch: {} subscripts for rank-{} array", idx.len(), shape.rank()),
                        );
                        return None;
                    }
                    let elem = *elem;
                    for e in idx {
                        if let Some(t) = self.expr_type(e) {
                            if t != Type::Int64 {
                                self.err(e.span(), "array subscripts must be int64");
                            }
                        }
                    }
                    ty = match elem {
                        ScalarTy::Int64 => Type::Int64,
                        ScalarTy::Float64 => Type::Float64,
                    };
                }
            }
        }
        self.info.desig.insert(d.id, DesigInfo { binding, ty: ty.clone(), base_ty });
        Some(ty)
    }

    fn expr_type(&mut self, e: &Expr) -> Option<Type> {
        let ty = match e {
            Expr::Int(..) => Some(Type::Int64),
            Expr::Float(..) => Some(Type::Float64),
            Expr::Desig(d) => self.desig_type(d),
            Expr::Unary { op, expr, span, .. } => {
                let t = self.expr_type(expr)?;
                match op {
                    UnOp::Neg => match t {
                        Type::Int64 | Type::Float64 => Some(t),
                        other => {
                            self.err(*span, format!("cannot negate {}", other.display()));
                            None
                        }
                    },
                    UnOp::Not => {
                        if t != Type::Int64 {
                            self.err(*span, "'not' expects int64");
                        }
                        Some(Type::Int64)
                    }
                }
            }
            Expr::Binary { op, lhs, rhs, span, .. } => {
                let lt = self.expr_type(lhs)?;
                let rt = self.expr_type(rhs)?;
                let scalar = |t: &Type| matches!(t, Type::Int64 | Type::Float64);
                if !scalar(&lt) || !scalar(&rt) {
                    self.err(
                        *span,
                        format!(
                            "operator '{}' expects scalars, got {} and {}",
                            op.text(),
                            lt.display(),
                            rt.display()
                        ),
                    );
                    return None;
                }
                if *op == BinOp::Mod && (lt != Type::Int64 || rt != Type::Int64) {
                    self.err(*span, "'mod' expects int64 operands");
                    return None;
                }
                if op.is_logical() && (lt != Type::Int64 || rt != Type::Int64) {
                    self.err(*span, format!("'{}' expects int64 operands", op.text()));
                    return None;
                }
                if op.is_comparison() || op.is_logical() {
                    Some(Type::Int64)
                } else if lt == Type::Float64 || rt == Type::Float64 {
                    Some(Type::Float64)
                } else {
                    Some(Type::Int64)
                }
            }
            Expr::HandleOf { routine, span, .. } => {
                if !self.routine_sigs.contains_key(routine) && !self.extern_sigs.contains_key(routine) {
                    self.err(*span, format!("undefined name '{routine}'"));
                    None
                } else {
                    Some(Type::RoutineHandle)
                }
            }
        };
        if let Some(t) = &ty {
            self.info.expr_ty.insert(e.id(), t.clone());
        }
        ty
    }
}

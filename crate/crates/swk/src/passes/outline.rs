//! Target-region outlining.
//!
//! Each `!$omp target` region is moved into a fresh entry routine tagged
//! `target_entrypoint`; the original site becomes a `DispatchSite` statement
//! that builds the capture record and hands the task to the runtime.
//!
//! Capture rules: scalars and handles by value, arrays and records by
//! address (descriptor); globals are not captured, device code reads them
//! through main memory. Layout is declaration order (outermost scope first,
//! parameters before locals), 8-byte aligned.

use crate::diag::{Diagnostic, Span};
use crate::frontend::ast::*;
use crate::frontend::sema::TypedUnit;
use crate::ir::DESC_BYTES;

#[derive(Debug, Clone, PartialEq)]
pub struct EntryInfo {
    pub name: String,
    /// Routine containing the dispatch site.
    pub parent: String,
    pub device: u8,
    pub captured: Vec<CapturedVar>,
    pub capture_size: u32,
}

pub fn outline_targets(typed: &TypedUnit) -> Result<(ProgramUnit, Vec<EntryInfo>), Vec<Diagnostic>> {
    let mut unit = typed.unit.clone();
    let mut cx = Outliner {
        file: unit.path.clone(),
        diags: Vec::new(),
        entries: Vec::new(),
        new_routines: Vec::new(),
        next_id: 1_000_000, // renumbered afterwards
    };
    let mut routines = std::mem::take(&mut unit.routines);
    for r in &mut routines {
        let mut chain = Vec::new();
        cx.outline_routine(r, &mut chain);
    }
    let mut records = std::mem::take(&mut unit.record_types);
    for rec in &mut records {
        for m in &mut rec.methods {
            let mut chain = Vec::new();
            cx.outline_routine(m, &mut chain);
        }
    }
    unit.record_types = records;
    routines.append(&mut cx.new_routines);
    unit.routines = routines;
    if cx.diags.iter().any(|d| d.severity == crate::diag::Severity::Error) {
        let mut all = unit.diagnostics;
        all.extend(cx.diags);
        Err(all)
    } else {
        Ok((unit, cx.entries))
    }
}

/// One lexical scope on the way down to a region.
struct ScopeInfo {
    /// Dotted path of the routine ("main", "main.helper", "Rec%m").
    path: String,
    /// (name, type, is_param, decl_index)
    vars: Vec<(String, Type, bool, usize)>,
    /// Clones of the routines nested directly in this scope.
    nested: Vec<Routine>,
}

struct Outliner {
    file: String,
    diags: Vec<Diagnostic>,
    entries: Vec<EntryInfo>,
    new_routines: Vec<Routine>,
    next_id: u32,
}

impl Outliner {
    fn id(&mut self) -> NodeId {
        self.next_id += 1;
        NodeId(self.next_id)
    }

    fn err(&mut self, span: Span, msg: impl Into<String>) {
        self.diags.push(Diagnostic::error(&self.file, span, msg));
    }

    fn outline_routine(&mut self, r: &mut Routine, chain: &mut Vec<ScopeInfo>) {
        let path = match chain.last() {
            Some(parent) => format!("{}.{}", parent.path, r.name),
            None => match &r.is_virtual_method_of {
                Some(rec) => format!("{rec}%{}", r.name),
                None => r.name.clone(),
            },
        };
        let mut vars = Vec::new();
        if r.is_virtual_method_of.is_some() {
            vars.push(("self".to_string(), Type::Record(r.is_virtual_method_of.clone().unwrap()), true, 0));
        }
        for (i, p) in r.params.iter().enumerate() {
            vars.push((p.name.clone(), p.ty.clone(), true, i + 1));
        }
        for (i, s) in r.body.iter().enumerate() {
            if let Stmt::Local(v) = s {
                vars.push((v.name.clone(), v.ty.clone(), false, i));
            }
        }
        chain.push(ScopeInfo { path: path.clone(), vars, nested: r.nested.clone() });
        let mut counter = 0usize;
        let body = std::mem::take(&mut r.body);
        r.body = self.transform_block(body, chain, &path, &mut counter);
        for n in &mut r.nested {
            self.outline_routine(n, chain);
        }
        chain.pop();
    }

    fn transform_block(
        &mut self,
        block: Block,
        chain: &mut Vec<ScopeInfo>,
        parent_path: &str,
        counter: &mut usize,
    ) -> Block {
        let mut out = Vec::with_capacity(block.len());
        for stmt in block {
            match stmt {
                Stmt::Target { body, private, device, span, id, .. } => {
                    let k = *counter;
                    *counter += 1;
                    let _ = id;
                    match self.outline_region(body, &private, device, span, chain, parent_path, k) {
                        Some(site) => out.push(site),
                        None => {}
                    }
                }
                Stmt::Do { var, var_span, from, to, step, body, span, id } => {
                    let body = self.transform_block(body, chain, parent_path, counter);
                    out.push(Stmt::Do { var, var_span, from, to, step, body, span, id });
                }
                Stmt::If { cond, then_body, else_body, span, id } => {
                    let then_body = self.transform_block(then_body, chain, parent_path, counter);
                    let else_body =
                        else_body.map(|b| self.transform_block(b, chain, parent_path, counter));
                    out.push(Stmt::If { cond, then_body, else_body, span, id });
                }
                Stmt::Master { body, span, end_span, id } => {
                    let body = self.transform_block(body, chain, parent_path, counter);
                    out.push(Stmt::Master { body, span, end_span, id });
                }
                Stmt::Single { body, span, end_span, id } => {
                    let body = self.transform_block(body, chain, parent_path, counter);
                    out.push(Stmt::Single { body, span, end_span, id });
                }
                other => out.push(other),
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn outline_region(
        &mut self,
        body: Block,
        private: &[(String, Span)],
        device: i64,
        span: Span,
        chain: &[ScopeInfo],
        parent_path: &str,
        k: usize,
    ) -> Option<Stmt> {
        let entry_name = format!("{parent_path}__target{k}");
        // names declared inside the region shadow enclosing ones
        let region_locals: Vec<&str> = body
            .iter()
            .filter_map(|s| match s {
                Stmt::Local(v) => Some(v.name.as_str()),
                _ => None,
            })
            .collect();

        // referenced names, walking through called trampolines of the
        // immediately enclosing routine
        let mut names = Vec::new();
        collect_names(&body, &mut names);
        let innermost = chain.last().expect("outlining inside a routine");
        let mut trampolines: Vec<&Routine> = Vec::new();
        let mut queue = names.clone();
        let mut qi = 0;
        while qi < queue.len() {
            let n = queue[qi].clone();
            qi += 1;
            // trampoline of the immediately enclosing routine?
            if let Some(t) = innermost.nested.iter().find(|t| t.name == n) {
                if trampolines.iter().any(|x| x.name == t.name) {
                    continue;
                }
                if region_locals.contains(&n.as_str()) || private.iter().any(|(p, _)| p == &n) {
                    // shadowed: the call cannot reach the trampoline anyway
                    continue;
                }
                trampolines.push(t);
                let mut inner = Vec::new();
                collect_names_routine(t, &mut inner);
                for x in inner {
                    if !names.contains(&x) {
                        names.push(x.clone());
                        queue.push(x);
                    }
                }
            } else {
                // trampoline of a non-enclosing (outer) routine is not capturable
                for (depth, scope) in chain.iter().rev().enumerate().skip(1) {
                    if scope.nested.iter().any(|t| t.name == n) {
                        // only an error if no variable shadows it first
                        let shadowed = chain
                            .iter()
                            .rev()
                            .take(depth)
                            .any(|s| s.vars.iter().any(|(v, ..)| v == &n));
                        if !shadowed && !region_locals.contains(&n.as_str()) {
                            self.err(
                                span,
                                format!(
                                    "cannot capture '{n}': it is a routine nested in non-enclosing '{}'",
                                    scope.path
                                ),
                            );
                        }
                        break;
                    }
                }
            }
        }

        // trampolines must not reference names shadowed by region locals or
        // privates: the copies rebind to the entry frame by name
        for t in &trampolines {
            let mut tnames = Vec::new();
            collect_names_routine(t, &mut tnames);
            for n in tnames {
                let bound_in_t = t.params.iter().any(|p| p.name == n);
                if bound_in_t {
                    continue;
                }
                if region_locals.contains(&n.as_str()) || private.iter().any(|(p, _)| p == &n) {
                    self.err(
                        span,
                        format!(
                            "region-local or private '{n}' shadows a variable referenced by trampoline '{}'",
                            t.name
                        ),
                    );
                }
            }
        }

        // capture set: innermost binding of each free name, skipping
        // region-locals, privates, globals and routine names
        struct Cap {
            name: String,
            hops: u8,
            ty: Type,
            is_param: bool,
            decl_idx: usize,
        }
        let mut caps: Vec<Cap> = Vec::new();
        for n in &names {
            if region_locals.contains(&n.as_str()) || private.iter().any(|(p, _)| p == n) {
                continue;
            }
            for (hops, scope) in chain.iter().rev().enumerate() {
                if let Some((_, ty, is_param, decl_idx)) =
                    scope.vars.iter().find(|(v, ..)| v == n)
                {
                    caps.push(Cap {
                        name: n.clone(),
                        hops: hops as u8,
                        ty: ty.clone(),
                        is_param: *is_param,
                        decl_idx: *decl_idx,
                    });
                    break;
                }
                if scope.nested.iter().any(|t| t.name == *n) {
                    break; // trampoline reference, handled above
                }
            }
        }
        // declaration order: outermost scope first, params before locals
        caps.sort_by(|a, b| {
            b.hops
                .cmp(&a.hops)
                .then(b.is_param.cmp(&a.is_param))
                .then(a.decl_idx.cmp(&b.decl_idx))
        });

        let mut captured = Vec::new();
        let mut off = 0u32;
        for c in caps {
            let (mode, size) = match &c.ty {
                Type::Int64 | Type::Float64 | Type::RoutineHandle => (CaptureMode::ByValue, 8),
                Type::Array(..) => (CaptureMode::ByAddress, DESC_BYTES),
                Type::Record(_) => (CaptureMode::ByAddress, 8),
            };
            captured.push(CapturedVar { name: c.name, hops: c.hops, ty: c.ty, mode, offset: off });
            off += size;
        }
        let capture_size = off;

        // entry routine: captured vars become parameters (scalars arrive by
        // value from the capture record, so writes stay private to the core)
        let mut params = Vec::new();
        for c in &captured {
            let ty = match &c.ty {
                Type::Array(elem, shape) => Type::Array(
                    *elem,
                    ArrayShape { extents: vec![Extent::Deferred; shape.rank()] },
                ),
                other => other.clone(),
            };
            params.push(VarDecl { name: c.name.clone(), ty, storage: Storage::Param, span });
        }
        let mut entry_body: Block = Vec::new();
        for (p, pspan) in private {
            let ty = chain
                .iter()
                .rev()
                .find_map(|s| s.vars.iter().find(|(v, ..)| v == p).map(|(_, t, ..)| t.clone()))
                .unwrap_or(Type::Int64);
            entry_body.push(Stmt::Local(VarDecl {
                name: p.clone(),
                ty,
                storage: Storage::Local,
                span: *pspan,
            }));
        }
        entry_body.extend(body);

        let entry = Routine {
            name: entry_name.clone(),
            params,
            body: entry_body,
            nested: trampolines.into_iter().cloned().collect(),
            attributes: RoutineAttrs { declare_target: false, target_entrypoint: true },
            is_virtual_method_of: None,
            span,
            id: self.id(),
        };
        self.new_routines.push(entry);
        self.entries.push(EntryInfo {
            name: entry_name.clone(),
            parent: parent_path.to_string(),
            device: device as u8,
            captured: captured.clone(),
            capture_size,
        });

        let id = self.id();
        Some(Stmt::DispatchSite { entry: entry_name, device, captured, span, id })
    }
}

// ---- free-name walks -----------------------------------------------------

fn add(out: &mut Vec<String>, n: &str) {
    if !out.iter().any(|x| x == n) {
        out.push(n.to_string());
    }
}

fn collect_names_routine(r: &Routine, out: &mut Vec<String>) {
    collect_names(&r.body, out);
    for n in &r.nested {
        collect_names_routine(n, out);
    }
}

pub(crate) fn collect_names(block: &[Stmt], out: &mut Vec<String>) {
    fn walk_desig(d: &Designator, out: &mut Vec<String>) {
        add(out, &d.base);
        for p in &d.parts {
            if let DesigPart::Index(idx) = p {
                for e in idx {
                    walk_expr(e, out);
                }
            }
        }
    }
    fn walk_expr(e: &Expr, out: &mut Vec<String>) {
        match e {
            Expr::Int(..) | Expr::Float(..) => {}
            Expr::HandleOf { .. } => {}
            Expr::Desig(d) => walk_desig(d, out),
            Expr::Unary { expr, .. } => walk_expr(expr, out),
            Expr::Binary { lhs, rhs, .. } => {
                walk_expr(lhs, out);
                walk_expr(rhs, out);
            }
        }
    }
    for s in block {
        match s {
            Stmt::Local(_) => {}
            Stmt::Assign { target, value, .. } => {
                walk_desig(target, out);
                walk_expr(value, out);
            }
            Stmt::Do { var, from, to, step, body, .. } => {
                add(out, var);
                walk_expr(from, out);
                walk_expr(to, out);
                if let Some(s) = step {
                    walk_expr(s, out);
                }
                collect_names(body, out);
            }
            Stmt::If { cond, then_body, else_body, .. } => {
                walk_expr(cond, out);
                collect_names(then_body, out);
                if let Some(b) = else_body {
                    collect_names(b, out);
                }
            }
            Stmt::Call { callee, args, .. } => {
                match callee {
                    Callee::Named(n) => add(out, n),
                    Callee::Method { recv, .. } | Callee::DirectMethod { recv, .. } => {
                        walk_desig(recv, out)
                    }
                }
                for a in args {
                    walk_expr(a, out);
                }
            }
            Stmt::Return { .. }
            | Stmt::Barrier { .. }
            | Stmt::CriticalEnter { .. }
            | Stmt::CriticalExit { .. } => {}
            Stmt::Target { body, .. } | Stmt::Master { body, .. } | Stmt::Single { body, .. } => {
                collect_names(body, out)
            }
            Stmt::DispatchSite { .. } => {}
        }
    }
}

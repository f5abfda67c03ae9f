//! Trampoline inlining for device code.
//!
//! The static-chain calling convention is unavailable on compute cores, so
//! within device-marked routines every call to a nested routine is replaced
//! by its body, with parameters bound to the argument places computed at the
//! call site and locals renamed apart. The transform applies transitively;
//! direct or mutual recursion among nested routines reachable from device
//! code is a hard compile error. Host-side copies keep their nested routines
//! and static-chain calls.

use crate::diag::{Diagnostic, Span};
use crate::frontend::ast::*;
use crate::frontend::sema::{CallKind, TypedUnit};

use super::marking::MarkingSet;

/// Builds the device-side variant of the unit: marked routines inlined and
/// stripped of nested definitions. The result must be renumbered and
/// revalidated before use.
pub fn inline_trampolines(
    typed: &TypedUnit,
    marking: &MarkingSet,
) -> Result<ProgramUnit, Vec<Diagnostic>> {
    let mut unit = typed.unit.clone();
    let mut diags = Vec::new();
    let mut routines = std::mem::take(&mut unit.routines);
    for r in &mut routines {
        if marking.contains(&r.name) {
            inline_routine(typed, r, &unit.path, &mut diags);
        }
    }
    unit.routines = routines;
    let mut records = std::mem::take(&mut unit.record_types);
    for rec in &mut records {
        for m in &mut rec.methods {
            let qual = format!("{}%{}", rec.name, m.name);
            if marking.contains(&qual) {
                inline_routine(typed, m, &unit.path, &mut diags);
            }
        }
    }
    unit.record_types = records;
    if diags.iter().any(|d| d.severity == crate::diag::Severity::Error) {
        Err(diags)
    } else {
        Ok(unit)
    }
}

fn inline_routine(typed: &TypedUnit, r: &mut Routine, file: &str, diags: &mut Vec<Diagnostic>) {
    let nested = r.nested.clone();
    let mut cx = Inliner {
        typed,
        file: file.to_string(),
        diags,
        counter: 0,
        hoisted: Vec::new(),
        next_id: 2_000_000,
    };
    let body = std::mem::take(&mut r.body);
    let mut scopes = vec![nested];
    let mut active = Vec::new();
    let body = cx.inline_block(body, &mut scopes, &mut active);
    // hoisted temp declarations go to the routine body top so they stay at
    // declaration-legal positions
    let mut new_body: Block = cx.hoisted.drain(..).collect();
    new_body.extend(body);
    r.body = new_body;
    r.nested.clear();
}

struct Inliner<'a> {
    typed: &'a TypedUnit,
    file: String,
    diags: &'a mut Vec<Diagnostic>,
    counter: usize,
    hoisted: Vec<Stmt>,
    next_id: u32,
}

impl<'a> Inliner<'a> {
    fn id(&mut self) -> NodeId {
        self.next_id += 1;
        NodeId(self.next_id)
    }

    fn err(&mut self, span: Span, msg: impl Into<String>) {
        self.diags.push(Diagnostic::error(&self.file, span, msg));
    }

    fn fresh(&mut self, base: &str) -> String {
        let n = self.counter;
        self.counter += 1;
        format!("__inl{n}_{base}")
    }

    fn inline_block(
        &mut self,
        block: Block,
        scopes: &mut Vec<Vec<Routine>>,
        active: &mut Vec<String>,
    ) -> Block {
        let mut out = Vec::with_capacity(block.len());
        for stmt in block {
            match stmt {
                Stmt::Call { callee, args, span, id } => {
                    let nested_call = matches!(
                        self.typed.info.calls.get(&id).map(|c| &c.kind),
                        Some(CallKind::Nested { .. })
                    );
                    if nested_call {
                        let Some(CallKind::Nested { hops, name }) =
                            self.typed.info.calls.get(&id).map(|c| c.kind.clone())
                        else {
                            unreachable!()
                        };
                        self.inline_call(&name, hops, &args, span, scopes, active, &mut out);
                    } else {
                        out.push(Stmt::Call { callee, args, span, id });
                    }
                }
                Stmt::Do { var, var_span, from, to, step, body, span, id } => {
                    let body = self.inline_block(body, scopes, active);
                    out.push(Stmt::Do { var, var_span, from, to, step, body, span, id });
                }
                Stmt::If { cond, then_body, else_body, span, id } => {
                    let then_body = self.inline_block(then_body, scopes, active);
                    let else_body = else_body.map(|b| self.inline_block(b, scopes, active));
                    out.push(Stmt::If { cond, then_body, else_body, span, id });
                }
                Stmt::Master { body, span, end_span, id } => {
                    let body = self.inline_block(body, scopes, active);
                    out.push(Stmt::Master { body, span, end_span, id });
                }
                Stmt::Single { body, span, end_span, id } => {
                    let body = self.inline_block(body, scopes, active);
                    out.push(Stmt::Single { body, span, end_span, id });
                }
                other => out.push(other),
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn inline_call(
        &mut self,
        name: &str,
        hops: u8,
        args: &[Expr],
        span: Span,
        scopes: &mut Vec<Vec<Routine>>,
        active: &mut Vec<String>,
        out: &mut Block,
    ) {
        let scope_idx = scopes.len().checked_sub(1 + hops as usize);
        let callee = scope_idx
            .and_then(|i| scopes.get(i))
            .and_then(|s| s.iter().find(|t| t.name == name))
            .cloned();
        let Some(callee) = callee else {
            self.err(span, format!("internal: trampoline '{name}' not found for inlining"));
            return;
        };
        if active.iter().any(|a| a == name) {
            self.err(
                span,
                format!("recursive trampoline '{name}' is reachable from device code"),
            );
            return;
        }
        if contains_return(&callee.body) {
            self.err(
                span,
                format!("trampoline '{name}' contains 'return', which device inlining does not support"),
            );
            return;
        }
        active.push(name.to_string());
        // first expand the callee's own nested calls; the scope stack must
        // match the lexical position of the callee body, then be restored
        let saved_tail: Vec<Vec<Routine>> = scopes.drain(scope_idx.unwrap() + 1..).collect();
        scopes.push(callee.nested.clone());
        let body = self.inline_block(callee.body.clone(), scopes, active);
        scopes.pop();
        scopes.extend(saved_tail);
        active.pop();

        // rename the callee's locals apart
        let mut renames: Vec<(String, String)> = Vec::new();
        let mut body = {
            let mut locals = Vec::new();
            collect_local_names(&body, &mut locals);
            for l in &locals {
                renames.push((l.clone(), self.fresh(l)));
            }
            let mut b = body;
            for (from, to) in &renames {
                let repl = Designator {
                    base: to.clone(),
                    parts: Vec::new(),
                    span,
                    id: NodeId(0),
                };
                substitute_block(&mut b, from, &repl);
                rename_local_decls(&mut b, from, to);
            }
            b
        };

        // a scalar param used as a do-loop variable can only be bound to a
        // plain variable argument
        for (p, a) in callee.params.iter().zip(args) {
            if uses_as_loop_var(&body, &p.name) {
                let plain = matches!(a, Expr::Desig(d) if d.parts.is_empty());
                if !plain {
                    self.err(
                        span,
                        format!(
                            "trampoline '{name}' uses parameter '{}' as a loop variable; the argument must be a plain variable",
                            p.name
                        ),
                    );
                    return;
                }
            }
        }

        // bind parameters: lvalue arguments substitute directly (indices
        // hoisted to call-time temps); expressions materialize into temps
        let mut pre: Block = Vec::new();
        for (p, a) in callee.params.iter().zip(args) {
            let repl = match a {
                Expr::Desig(d) => {
                    let mut parts = Vec::new();
                    for part in &d.parts {
                        match part {
                            DesigPart::Field(f) => parts.push(DesigPart::Field(f.clone())),
                            DesigPart::Index(idx) => {
                                let mut hoisted_idx = Vec::new();
                                for e in idx {
                                    if matches!(e, Expr::Int(..)) {
                                        hoisted_idx.push(e.clone());
                                    } else {
                                        let tmp = self.fresh(&format!("{}_i", p.name));
                                        self.hoist_decl(&tmp, Type::Int64, span);
                                        let tid = self.id();
                                        let did = self.id();
                                        pre.push(Stmt::Assign {
                                            target: Designator {
                                                base: tmp.clone(),
                                                parts: Vec::new(),
                                                span,
                                                id: did,
                                            },
                                            value: e.clone(),
                                            span,
                                            id: tid,
                                        });
                                        let eid = self.id();
                                        hoisted_idx.push(Expr::Desig(Designator {
                                            base: tmp,
                                            parts: Vec::new(),
                                            span,
                                            id: eid,
                                        }));
                                    }
                                }
                                parts.push(DesigPart::Index(hoisted_idx));
                            }
                        }
                    }
                    Designator { base: d.base.clone(), parts, span: d.span, id: NodeId(0) }
                }
                other => {
                    let tmp = self.fresh(&p.name);
                    self.hoist_decl(&tmp, p.ty.clone(), span);
                    let sid = self.id();
                    let did = self.id();
                    pre.push(Stmt::Assign {
                        target: Designator { base: tmp.clone(), parts: Vec::new(), span, id: did },
                        value: other.clone(),
                        span,
                        id: sid,
                    });
                    Designator { base: tmp, parts: Vec::new(), span, id: NodeId(0) }
                }
            };
            substitute_block(&mut body, &p.name, &repl);
        }

        out.extend(pre);
        out.extend(body);
    }

    fn hoist_decl(&mut self, name: &str, ty: Type, span: Span) {
        self.hoisted.push(Stmt::Local(VarDecl {
            name: name.to_string(),
            ty,
            storage: Storage::Local,
            span,
        }));
    }
}

fn uses_as_loop_var(block: &Block, name: &str) -> bool {
    block.iter().any(|s| match s {
        Stmt::Do { var, body, .. } => var == name || uses_as_loop_var(body, name),
        Stmt::If { then_body, else_body, .. } => {
            uses_as_loop_var(then_body, name)
                || else_body.as_ref().map(|b| uses_as_loop_var(b, name)).unwrap_or(false)
        }
        Stmt::Master { body, .. } | Stmt::Single { body, .. } => uses_as_loop_var(body, name),
        _ => false,
    })
}

fn contains_return(block: &Block) -> bool {
    block.iter().any(|s| match s {
        Stmt::Return { .. } => true,
        Stmt::Do { body, .. } => contains_return(body),
        Stmt::If { then_body, else_body, .. } => {
            contains_return(then_body)
                || else_body.as_ref().map(|b| contains_return(b)).unwrap_or(false)
        }
        Stmt::Master { body, .. } | Stmt::Single { body, .. } => contains_return(body),
        _ => false,
    })
}

fn collect_local_names(block: &Block, out: &mut Vec<String>) {
    for s in block {
        match s {
            Stmt::Local(v) => {
                if !out.contains(&v.name) {
                    out.push(v.name.clone());
                }
            }
            Stmt::Do { body, .. } => collect_local_names(body, out),
            Stmt::If { then_body, else_body, .. } => {
                collect_local_names(then_body, out);
                if let Some(b) = else_body {
                    collect_local_names(b, out);
                }
            }
            Stmt::Master { body, .. } | Stmt::Single { body, .. } => collect_local_names(body, out),
            _ => {}
        }
    }
}

fn rename_local_decls(block: &mut Block, from: &str, to: &str) {
    for s in block {
        match s {
            Stmt::Local(v) if v.name == from => v.name = to.to_string(),
            Stmt::Do { body, .. } => rename_local_decls(body, from, to),
            Stmt::If { then_body, else_body, .. } => {
                rename_local_decls(then_body, from, to);
                if let Some(b) = else_body {
                    rename_local_decls(b, from, to);
                }
            }
            Stmt::Master { body, .. } | Stmt::Single { body, .. } => {
                rename_local_decls(body, from, to)
            }
            _ => {}
        }
    }
}

/// Replace every designator whose base is `from` with `repl`, appending the
/// original's remaining parts.
fn substitute_block(block: &mut Block, from: &str, repl: &Designator) {
    for s in block {
        substitute_stmt(s, from, repl);
    }
}

fn substitute_stmt(s: &mut Stmt, from: &str, repl: &Designator) {
    match s {
        Stmt::Local(_) => {}
        Stmt::Assign { target, value, .. } => {
            substitute_desig(target, from, repl);
            substitute_expr(value, from, repl);
        }
        Stmt::Do { var, from: f, to, step, body, .. } => {
            if var == from {
                // loop over a substituted scalar: only plain renames are legal
                if repl.parts.is_empty() {
                    *var = repl.base.clone();
                }
            }
            substitute_expr(f, from, repl);
            substitute_expr(to, from, repl);
            if let Some(st) = step {
                substitute_expr(st, from, repl);
            }
            substitute_block(body, from, repl);
        }
        Stmt::If { cond, then_body, else_body, .. } => {
            substitute_expr(cond, from, repl);
            substitute_block(then_body, from, repl);
            if let Some(b) = else_body {
                substitute_block(b, from, repl);
            }
        }
        Stmt::Call { callee, args, .. } => {
            match callee {
                Callee::Named(_) => {}
                Callee::Method { recv, .. } | Callee::DirectMethod { recv, .. } => {
                    substitute_desig(recv, from, repl)
                }
            }
            for a in args {
                substitute_expr(a, from, repl);
            }
        }
        Stmt::Return { .. }
        | Stmt::Barrier { .. }
        | Stmt::CriticalEnter { .. }
        | Stmt::CriticalExit { .. }
        | Stmt::DispatchSite { .. } => {}
        Stmt::Target { body, .. } | Stmt::Master { body, .. } | Stmt::Single { body, .. } => {
            substitute_block(body, from, repl)
        }
    }
}

fn substitute_desig(d: &mut Designator, from: &str, repl: &Designator) {
    for p in &mut d.parts {
        if let DesigPart::Index(idx) = p {
            for e in idx {
                substitute_expr(e, from, repl);
            }
        }
    }
    if d.base == from {
        d.base = repl.base.clone();
        let mut parts = repl.parts.clone();
        parts.append(&mut d.parts);
        d.parts = parts;
    }
}

fn substitute_expr(e: &mut Expr, from: &str, repl: &Designator) {
    match e {
        Expr::Int(..) | Expr::Float(..) | Expr::HandleOf { .. } => {}
        Expr::Desig(d) => substitute_desig(d, from, repl),
        Expr::Unary { expr, .. } => substitute_expr(expr, from, repl),
        Expr::Binary { lhs, rhs, .. } => {
            substitute_expr(lhs, from, repl);
            substitute_expr(rhs, from, repl);
        }
    }
}

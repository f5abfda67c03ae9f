//! Call graph construction over a validated unit.
//!
//! Calls inside nested routines are attributed to the nesting top-level
//! parent until inlining resolves them away. Virtual call sites are recorded
//! unresolved; marking resolves them against the receiver's static type.

use crate::frontend::ast::*;
use crate::frontend::sema::{CallKind, TypedUnit};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallGraph {
    /// Top-level routine names plus qualified method names (`Rec%m`),
    /// in source order.
    pub nodes: Vec<String>,
    /// Edges in source order.
    pub edges: Vec<CgEdge>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CgEdge {
    pub caller: String,
    pub callee: CgCallee,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CgCallee {
    Direct(String),
    Extern(String),
    /// Unresolved until devirtualization: static receiver type + method.
    Virtual { record: String, method: String },
    /// Referenced through `handle(...)` or as a spawn target; runs on the
    /// device but is not followed for marking.
    Handle(String),
}

impl CallGraph {
    pub fn callees_of<'a, 'b>(&'a self, name: &'b str) -> impl Iterator<Item = &'a CgCallee> + use<'a, 'b> {
        self.edges.iter().filter(move |e| e.caller == name).map(|e| &e.callee)
    }
}

pub fn build_call_graph(typed: &TypedUnit) -> CallGraph {
    let unit = &typed.unit;
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    for r in &unit.routines {
        nodes.push(r.name.clone());
        collect_routine(typed, r, &r.name, &mut edges);
    }
    for rec in &unit.record_types {
        for m in &rec.methods {
            let qual = format!("{}%{}", rec.name, m.name);
            nodes.push(qual.clone());
            collect_routine(typed, m, &qual, &mut edges);
        }
    }
    CallGraph { nodes, edges }
}

fn collect_routine(typed: &TypedUnit, r: &Routine, caller: &str, edges: &mut Vec<CgEdge>) {
    collect_block(typed, &r.body, caller, edges);
    // nested routines attributed to the nesting parent
    for n in &r.nested {
        collect_routine(typed, n, caller, edges);
    }
}

fn collect_block(typed: &TypedUnit, block: &Block, caller: &str, edges: &mut Vec<CgEdge>) {
    for s in block {
        collect_stmt(typed, s, caller, edges);
    }
}

fn collect_stmt(typed: &TypedUnit, s: &Stmt, caller: &str, edges: &mut Vec<CgEdge>) {
    let push = |edges: &mut Vec<CgEdge>, callee: CgCallee| {
        edges.push(CgEdge { caller: caller.to_string(), callee });
    };
    match s {
        Stmt::Call { callee: _, args, id, .. } => {
            if let Some(info) = typed.info.calls.get(id) {
                match &info.kind {
                    CallKind::TopLevel(n) => push(edges, CgCallee::Direct(n.clone())),
                    CallKind::Extern(n) => push(edges, CgCallee::Extern(n.clone())),
                    CallKind::Nested { .. } => {
                        // intra-frame; resolved by inlining on the device side
                    }
                    CallKind::Method { record, method } => push(
                        edges,
                        CgCallee::Virtual { record: record.clone(), method: method.clone() },
                    ),
                    CallKind::DirectMethod { record, method } => {
                        push(edges, CgCallee::Direct(format!("{record}%{method}")))
                    }
                    CallKind::Intrinsic(_) => {
                        if let Some(target) = &info.spawn_target {
                            push(edges, CgCallee::Handle(target.clone()));
                        }
                    }
                }
            }
            for a in args {
                collect_expr(a, caller, edges);
            }
        }
        Stmt::Assign { value, target, .. } => {
            collect_desig(target, caller, edges);
            collect_expr(value, caller, edges);
        }
        Stmt::Do { from, to, step, body, .. } => {
            collect_expr(from, caller, edges);
            collect_expr(to, caller, edges);
            if let Some(st) = step {
                collect_expr(st, caller, edges);
            }
            collect_block(typed, body, caller, edges);
        }
        Stmt::If { cond, then_body, else_body, .. } => {
            collect_expr(cond, caller, edges);
            collect_block(typed, then_body, caller, edges);
            if let Some(b) = else_body {
                collect_block(typed, b, caller, edges);
            }
        }
        Stmt::Target { body, .. } | Stmt::Master { body, .. } | Stmt::Single { body, .. } => {
            collect_block(typed, body, caller, edges);
        }
        Stmt::DispatchSite { entry, .. } => {
            // the host-side call reaches the entry through the runtime
            edges.push(CgEdge { caller: caller.to_string(), callee: CgCallee::Handle(entry.clone()) });
        }
        _ => {}
    }
}

fn collect_expr(e: &Expr, caller: &str, edges: &mut Vec<CgEdge>) {
    match e {
        Expr::HandleOf { routine, .. } => {
            edges.push(CgEdge { caller: caller.to_string(), callee: CgCallee::Handle(routine.clone()) })
        }
        Expr::Desig(d) => collect_desig(d, caller, edges),
        Expr::Unary { expr, .. } => collect_expr(expr, caller, edges),
        Expr::Binary { lhs, rhs, .. } => {
            collect_expr(lhs, caller, edges);
            collect_expr(rhs, caller, edges);
        }
        _ => {}
    }
}

fn collect_desig(d: &Designator, caller: &str, edges: &mut Vec<CgEdge>) {
    for p in &d.parts {
        if let DesigPart::Index(idx) = p {
            for e in idx {
                collect_expr(e, caller, edges);
            }
        }
    }
}

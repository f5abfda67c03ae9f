//! Devirtualization of method calls in device code.
//!
//! Every dynamically bound method call inside a device-marked routine is
//! converted to a direct call to the method of the receiver's *static* type.
//! Each converted site leaves a warning; host-side calls keep dynamic
//! dispatch.

use crate::diag::Diagnostic;
use crate::frontend::ast::*;
use crate::frontend::sema::{resolve_method, CallKind, TypedUnit};

use super::marking::MarkingSet;

pub fn devirtualize(
    typed: &TypedUnit,
    marking: &MarkingSet,
) -> Result<(ProgramUnit, Vec<String>), Vec<Diagnostic>> {
    let mut unit = typed.unit.clone();
    let mut warnings = Vec::new();
    let mut diags = Vec::new();
    let mut routines = std::mem::take(&mut unit.routines);
    for r in &mut routines {
        if marking.contains(&r.name) {
            devirt_block(typed, &mut r.body, &unit.path, &mut warnings, &mut diags);
        }
    }
    unit.routines = routines;
    let mut records = std::mem::take(&mut unit.record_types);
    for rec in &mut records {
        for m in &mut rec.methods {
            let qual = format!("{}%{}", rec.name, m.name);
            if marking.contains(&qual) {
                devirt_block(typed, &mut m.body, &unit.path, &mut warnings, &mut diags);
            }
        }
    }
    unit.record_types = records;
    if diags.iter().any(|d| d.severity == crate::diag::Severity::Error) {
        Err(diags)
    } else {
        Ok((unit, warnings))
    }
}

fn devirt_block(
    typed: &TypedUnit,
    block: &mut Block,
    file: &str,
    warnings: &mut Vec<String>,
    diags: &mut Vec<Diagnostic>,
) {
    for s in block {
        match s {
            Stmt::Call { callee, span, id, .. } => {
                if let Callee::Method { recv, method } = callee {
                    let Some(CallKind::Method { record, .. }) =
                        typed.info.calls.get(id).map(|c| c.kind.clone())
                    else {
                        continue;
                    };
                    let Some(&ri) = typed.info.record_index.get(&record) else { continue };
                    match resolve_method(&typed.info.records, ri, method) {
                        Some(def) => {
                            let def_rec = typed.info.records[def].name.clone();
                            warnings.push(format!(
                                "{file}:{}:{}: warning: call to '{record}%{method}' is de-virtualized aggressively",
                                span.line, span.col
                            ));
                            *callee = Callee::DirectMethod {
                                recv: recv.clone(),
                                record: def_rec,
                                method: method.clone(),
                            };
                        }
                        None => diags.push(Diagnostic::error(
                            file,
                            *span,
                            format!("no candidate method '{method}' on record '{record}'"),
                        )),
                    }
                }
            }
            Stmt::Do { body, .. } => devirt_block(typed, body, file, warnings, diags),
            Stmt::If { then_body, else_body, .. } => {
                devirt_block(typed, then_body, file, warnings, diags);
                if let Some(b) = else_body {
                    devirt_block(typed, b, file, warnings, diags);
                }
            }
            Stmt::Master { body, .. } | Stmt::Single { body, .. } => {
                devirt_block(typed, body, file, warnings, diags)
            }
            _ => {}
        }
    }
}

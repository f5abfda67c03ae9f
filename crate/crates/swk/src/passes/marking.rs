//! Device-code marking: the transitive closure of routines needing CPE code
//! generation, seeded by target entrypoints, declare-target attributes and
//! o2ath entries. Virtual call sites count as edges to the receiver's static
//! type's method, mirroring what devirtualization will do.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::diag::{Diagnostic, Span};
use crate::frontend::ast::*;
use crate::frontend::sema::{resolve_method, CallKind, Intrinsic, TypedUnit};

use super::callgraph::{CallGraph, CgCallee};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkingSet {
    pub device_routines: BTreeSet<String>,
    pub reasons: BTreeMap<String, MarkReason>,
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarkReason {
    Entrypoint,
    DeclareTarget,
    O2athEntry,
    Reachable { from: String },
}

impl MarkingSet {
    pub fn contains(&self, name: &str) -> bool {
        self.device_routines.contains(name)
    }
}

/// `extra` holds sidecar o2ath entry names; in-source `!$o2ath entry`
/// directives are read from the unit itself.
pub fn mark_device_functions(
    typed: &TypedUnit,
    graph: &CallGraph,
    extra: &[String],
) -> Result<(MarkingSet, Vec<String>), Vec<Diagnostic>> {
    let unit = &typed.unit;
    let mut diags = Vec::new();
    let mut warnings = Vec::new();
    let mut marking = MarkingSet { device_routines: BTreeSet::new(), reasons: BTreeMap::new() };
    let mut work: VecDeque<String> = VecDeque::new();

    let seed = |marking: &mut MarkingSet, work: &mut VecDeque<String>, name: &str, reason: MarkReason| {
        if marking.device_routines.insert(name.to_string()) {
            marking.reasons.insert(name.to_string(), reason);
            work.push_back(name.to_string());
        }
    };

    for r in &unit.routines {
        if r.attributes.target_entrypoint {
            seed(&mut marking, &mut work, &r.name, MarkReason::Entrypoint);
        } else if r.attributes.declare_target {
            seed(&mut marking, &mut work, &r.name, MarkReason::DeclareTarget);
        }
    }
    for rec in &unit.record_types {
        for m in &rec.methods {
            if m.attributes.declare_target {
                let qual = format!("{}%{}", rec.name, m.name);
                seed(&mut marking, &mut work, &qual, MarkReason::DeclareTarget);
            }
        }
    }
    for (name, span) in &unit.o2ath_entries {
        if unit.routines.iter().any(|r| r.name == *name) {
            seed(&mut marking, &mut work, name, MarkReason::O2athEntry);
        } else {
            diags.push(Diagnostic::error(
                &unit.path,
                *span,
                format!("unknown o2ath entry '{name}'"),
            ));
        }
    }
    for name in extra {
        if unit.routines.iter().any(|r| r.name == *name) {
            seed(&mut marking, &mut work, name, MarkReason::O2athEntry);
        } else {
            diags.push(Diagnostic::error(
                &unit.path,
                Span::point(1, 1),
                format!("unknown o2ath entry '{name}' (entries file)"),
            ));
        }
    }

    // transitive closure; virtual edges resolve to the static type's method
    while let Some(cur) = work.pop_front() {
        for callee in graph.callees_of(&cur) {
            match callee {
                CgCallee::Direct(n) =>

                    seed(&mut marking, &mut work, n, MarkReason::Reachable { from: cur.clone() }),
                CgCallee::Virtual { record, method } => {
                    let Some(&ri) = typed.info.record_index.get(record) else { continue };
                    let Some(def) = resolve_method(&typed.info.records, ri, method) else {
                        diags.push(Diagnostic::error(
                            &unit.path,
                            Span::point(1, 1),
                            format!("no candidate method '{method}' on record '{record}'"),
                        ));
                        continue;
                    };
                    let qual = format!("{}%{}", typed.info.records[def].name, method);
                    if !marking.contains(&qual) {
                        warnings.push(format!(
                            "method '{qual}' marked for device code via virtual call in '{cur}'"
                        ));
                        seed(&mut marking, &mut work, &qual, MarkReason::Reachable { from: cur.clone() });
                    }
                }
                CgCallee::Extern(_) | CgCallee::Handle(_) => {
                    // externs are resolved at link; handle/spawn targets must
                    // be marked by the user in their own unit
                }
            }
        }
    }

    // device code may not perform host-only operations
    for name in &marking.device_routines {
        if let Some(r) = find_routine(unit, name) {
            check_host_only(typed, r, name, &unit.path, &mut diags);
        }
    }

    if diags.iter().any(|d| d.severity == crate::diag::Severity::Error) {
        Err(diags)
    } else {
        Ok((marking, warnings))
    }
}

pub fn find_routine<'a>(unit: &'a ProgramUnit, name: &str) -> Option<&'a Routine> {
    if let Some((rec, meth)) = name.split_once('%') {
        let rt = unit.record_types.iter().find(|r| r.name == rec)?;
        return rt.methods.iter().find(|m| m.name == meth);
    }
    unit.routines.iter().find(|r| r.name == name)
}

fn check_host_only(
    typed: &TypedUnit,
    r: &Routine,
    marked_name: &str,
    file: &str,
    diags: &mut Vec<Diagnostic>,
) {
    check_block(typed, &r.body, marked_name, file, diags);
    for n in &r.nested {
        check_host_only(typed, n, marked_name, file, diags);
    }
}

fn check_block(
    typed: &TypedUnit,
    block: &Block,
    marked_name: &str,
    file: &str,
    diags: &mut Vec<Diagnostic>,
) {
    for s in block {
        match s {
            Stmt::Call { id, span, .. } => {
                if let Some(info) = typed.info.calls.get(id) {
                    if let CallKind::Intrinsic(intr) = &info.kind {
                        if intr.host_only() {
                            diags.push(Diagnostic::error(
                                file,
                                *span,
                                format!(
                                    "device-marked routine '{marked_name}' calls host-only intrinsic '{}'",
                                    intrinsic_name(*intr)
                                ),
                            ));
                        }
                    }
                }
            }
            Stmt::DispatchSite { span, .. } | Stmt::Target { span, .. } => {
                diags.push(Diagnostic::error(
                    file,
                    *span,
                    format!("device-marked routine '{marked_name}' contains a target region"),
                ));
            }
            Stmt::Do { body, .. } => check_block(typed, body, marked_name, file, diags),
            Stmt::If { then_body, else_body, .. } => {
                check_block(typed, then_body, marked_name, file, diags);
                if let Some(b) = else_body {
                    check_block(typed, b, marked_name, file, diags);
                }
            }
            Stmt::Master { body, .. } | Stmt::Single { body, .. } => {
                check_block(typed, body, marked_name, file, diags)
            }
            _ => {}
        }
    }
}

fn intrinsic_name(i: Intrinsic) -> &'static str {
    match i {
        Intrinsic::GetCoreid => "get_coreid",
        Intrinsic::GetVnestid => "get_vnestid",
        Intrinsic::Spawn => "spawn",
        Intrinsic::Join => "join",
        Intrinsic::ReadInt64 => "read_int64",
        Intrinsic::PrintInt64 => "print_int64",
        Intrinsic::PrintFloat64 => "print_float64",
    }
}

//! Compilation pipeline: outline target regions, build the call graph, mark
//! device routines, inline trampolines, devirtualize, lower both sides and
//! link the dual image.

pub mod callgraph;
pub mod devirt;
pub mod link;
pub mod lower;
pub mod marking;
pub mod outline;
pub mod trampoline;

pub use callgraph::{build_call_graph, CallGraph, CgCallee, CgEdge};
pub use devirt::devirtualize;
pub use link::{link, LinkError, LoweredUnit, RecordPre};
pub use lower::{lower_device, lower_host, Side};
pub use marking::{mark_device_functions, MarkReason, MarkingSet};
pub use outline::{outline_targets, EntryInfo};
pub use trampoline::inline_trampolines;

use crate::diag::Diagnostic;
use crate::frontend::ast::renumber_unit;
use crate::frontend::sema::{validate_with, TypedUnit, ValidateOpts};

/// Per-unit pipeline products, ready for lowering and linking.
pub struct UnitArtifacts {
    /// Outlined unit (host variant), revalidated.
    pub host: TypedUnit,
    /// Inlined and devirtualized variant, revalidated.
    pub device: TypedUnit,
    pub entries: Vec<EntryInfo>,
    pub callgraph: CallGraph,
    pub marking: MarkingSet,
    pub warnings: Vec<String>,
}

/// Run the whole pass pipeline on one validated unit. `extra_entries` come
/// from the o2ath entries sidecar.
pub fn compile_unit(
    typed: TypedUnit,
    extra_entries: &[String],
    opts: ValidateOpts,
) -> Result<UnitArtifacts, Vec<Diagnostic>> {
    let (mut outlined, entries) = outline_targets(&typed)?;
    renumber_unit(&mut outlined);
    let host = validate_with(outlined, opts)?;

    let callgraph = build_call_graph(&host);
    let (marking, mut warnings) = mark_device_functions(&host, &callgraph, extra_entries)?;

    let mut device_unit = inline_trampolines(&host, &marking)?;
    renumber_unit(&mut device_unit);
    let device_typed = validate_with(device_unit, opts)?;
    let (mut devirted, mut devirt_warnings) = devirtualize(&device_typed, &marking)?;
    warnings.append(&mut devirt_warnings);
    renumber_unit(&mut devirted);
    let device = validate_with(devirted, opts)?;

    Ok(UnitArtifacts { host, device, entries, callgraph, marking, warnings })
}

/// Lower one unit's artifacts into its link contribution.
pub fn lower_unit(art: &UnitArtifacts) -> LoweredUnit {
    let host_side = lower_host(&art.host, &art.marking);
    let device_side = lower_device(&art.device, &art.marking, &art.entries);
    // method-name interning must agree between the two sides; merge them
    let mut method_names = host_side.method_names.clone();
    let mut device_fns = device_side.fns;
    let remap: Vec<u32> = device_side
        .method_names
        .iter()
        .map(|m| match method_names.iter().position(|x| x == m) {
            Some(i) => i as u32,
            None => {
                method_names.push(m.clone());
                (method_names.len() - 1) as u32
            }
        })
        .collect();
    for f in &mut device_fns {
        for instr in &mut f.code {
            if let crate::ir::Instr::CallVirt { method, .. } = instr {
                *method = remap[*method as usize];
            }
        }
    }

    let record_index = &art.host.info.record_index;
    let records = art
        .host
        .info
        .records
        .iter()
        .map(|r| RecordPre {
            name: r.name.clone(),
            parent: r.parent.map(|p| p as u32),
            fields: r
                .fields
                .iter()
                .map(|(n, t)| (n.clone(), lower::ty_meta(t, record_index)))
                .collect(),
            own_methods: r.own_methods.clone(),
        })
        .collect();
    let globals = art
        .host
        .unit
        .globals
        .iter()
        .map(|g| (g.name.clone(), lower::ty_meta(&g.ty, record_index)))
        .collect();

    LoweredUnit {
        path: art.host.unit.path.clone(),
        host_fns: host_side.fns,
        device_fns,
        entries: art.entries.clone(),
        globals,
        records,
        method_names,
        marked: art.marking.device_routines.iter().cloned().collect(),
        warnings: art.warnings.clone(),
    }
}

//! Linking: merge per-unit lowered tables into one program image with stable
//! function ids, resolve symbolic references, assign global offsets, build
//! vtables, and drop device-only routines from the host table.

use std::collections::HashMap;

use crate::ir::*;

use super::outline::EntryInfo;

/// Everything one unit contributes to the link.
pub struct LoweredUnit {
    pub path: String,
    pub host_fns: Vec<IrFunction>,
    pub device_fns: Vec<IrFunction>,
    pub entries: Vec<EntryInfo>,
    /// Unit globals in declaration order, with unit-local record ids.
    pub globals: Vec<(String, TyMeta)>,
    pub records: Vec<RecordPre>,
    /// Unit-local method-name interning used by `CallVirt`.
    pub method_names: Vec<String>,
    /// Marked (device) routine names.
    pub marked: Vec<String>,
    pub warnings: Vec<String>,
}

pub struct RecordPre {
    pub name: String,
    /// Unit-local parent record id.
    pub parent: Option<u32>,
    /// Flattened fields (inherited first), unit-local record ids in types.
    pub fields: Vec<(String, TyMeta)>,
    pub own_methods: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LinkError {
    #[error("duplicate symbol '{0}'")]
    DuplicateSymbol(String),
    #[error("undefined symbol '{name}' referenced from '{from}'")]
    UndefinedSymbol { name: String, from: String },
    #[error("device code in '{from}' calls '{name}', which has no device version; add an o2ath entry or declare target in its unit")]
    UnresolvedDeviceCall { name: String, from: String },
    #[error("'{0}' is used as a device handle but has no device version; add an o2ath entry or declare target")]
    HandleTargetNotDevice(String),
    #[error("no routine named 'main' in any linked unit")]
    NoMain,
}

pub fn link(units: Vec<LoweredUnit>, host_only: bool) -> Result<ProgramImage, Vec<LinkError>> {
    let mut errors = Vec::new();

    // ---- records ---------------------------------------------------------
    let mut records: Vec<RecordMeta> = Vec::new();
    let mut record_base: Vec<u32> = Vec::new();
    let mut record_names: HashMap<String, u32> = HashMap::new();
    for u in &units {
        record_base.push(records.len() as u32);
        let base = records.len() as u32;
        for r in &u.records {
            if record_names.insert(r.name.clone(), records.len() as u32).is_some() {
                errors.push(LinkError::DuplicateSymbol(r.name.clone()));
            }
            let mut fields = Vec::new();
            let mut off = 8u64; // tag word
            for (name, ty) in &r.fields {
                let ty = rebase_ty(ty.clone(), base);
                let size = match &ty {
                    TyMeta::Arr { rank, ext, .. } => {
                        (0..*rank as usize).map(|k| ext[k].max(0) as u64).product::<u64>() * 8
                    }
                    _ => 8,
                };
                fields.push(FieldMeta { name: name.clone(), ty, off });
                off += size;
            }
            records.push(RecordMeta {
                name: r.name.clone(),
                parent: r.parent.map(|p| p + base),
                fields,
                size: off,
                vtable: Vec::new(),
            });
        }
    }

    // ---- method names ------------------------------------------------------
    let mut method_names: Vec<String> = Vec::new();
    let mut method_remap: Vec<Vec<u32>> = Vec::new();
    for u in &units {
        let mut remap = Vec::new();
        for m in &u.method_names {
            match method_names.iter().position(|x| x == m) {
                Some(i) => remap.push(i as u32),
                None => {
                    method_names.push(m.clone());
                    remap.push((method_names.len() - 1) as u32);
                }
            }
        }
        method_remap.push(remap);
    }
    let intern_method = |method_names: &mut Vec<String>, name: &str| -> u32 {
        match method_names.iter().position(|x| x == name) {
            Some(i) => i as u32,
            None => {
                method_names.push(name.to_string());
                (method_names.len() - 1) as u32
            }
        }
    };

    // ---- globals ------------------------------------------------------------
    let mut globals: Vec<GlobalMeta> = Vec::new();
    let mut global_names: HashMap<String, u32> = HashMap::new();
    let mut offset = 0u64;
    for (ui, u) in units.iter().enumerate() {
        for (name, ty) in &u.globals {
            if global_names.insert(name.clone(), globals.len() as u32).is_some() {
                errors.push(LinkError::DuplicateSymbol(name.clone()));
            }
            let ty = rebase_ty(ty.clone(), record_base[ui]);
            let size = ty.byte_size(&records);
            globals.push(GlobalMeta { name: name.clone(), ty, offset, size });
            offset += size.div_ceil(8) * 8;
        }
    }
    let globals_size = offset;

    // ---- host retention -------------------------------------------------------
    // device-only routines (marked and never reachable from host roots) are
    // dropped from the host table; methods are always retained so vtables
    // stay complete
    let marked: std::collections::BTreeSet<&str> =
        units.iter().flat_map(|u| u.marked.iter().map(|s| s.as_str())).collect();
    let mut host_index: HashMap<&str, (usize, usize)> = HashMap::new();
    for (ui, u) in units.iter().enumerate() {
        for (fi, f) in u.host_fns.iter().enumerate() {
            if host_index.insert(f.name.as_str(), (ui, fi)).is_some() {
                errors.push(LinkError::DuplicateSymbol(f.name.clone()));
            }
        }
    }
    let mut retained: std::collections::BTreeSet<&str> = std::collections::BTreeSet::new();
    let mut work: Vec<&str> = Vec::new();
    for u in &units {
        for f in &u.host_fns {
            let is_root = match f.kind {
                FnKind::Method => true,
                FnKind::Nested => false,
                _ => f.name == "main" || !marked.contains(f.name.as_str()),
            };
            if is_root {
                retained.insert(f.name.as_str());
                work.push(f.name.as_str());
            }
        }
    }
    loop {
        while let Some(cur) = work.pop() {
            let Some(&(ui, fi)) = host_index.get(cur) else { continue };
            for instr in &units[ui].host_fns[fi].code {
                let callee = match instr {
                    Instr::Call { f: FuncRef::Sym(n), .. }
                    | Instr::CallNested { f: FuncRef::Sym(n), .. } => Some(n.as_str()),
                    _ => None,
                };
                if let Some(n) = callee {
                    if host_index.contains_key(n) && retained.insert(n) {
                        work.push(n);
                    }
                }
            }
        }
        // nested functions of retained ancestors are kept with them
        let mut grew = false;
        for u in &units {
            for f in &u.host_fns {
                if f.kind == FnKind::Nested && !retained.contains(f.name.as_str()) {
                    let root = f.name.split('.').next().unwrap_or(&f.name);
                    if retained.contains(root) {
                        retained.insert(f.name.as_str());
                        work.push(f.name.as_str());
                        grew = true;
                    }
                }
            }
        }
        if !grew && work.is_empty() {
            break;
        }
    }

    // ---- id assignment ---------------------------------------------------------
    let mut host_fns: Vec<IrFunction> = Vec::new();
    let mut host_ids: HashMap<String, FuncId> = HashMap::new();
    for u in &units {
        for f in &u.host_fns {
            if retained.contains(f.name.as_str()) {
                host_ids.insert(f.name.clone(), host_fns.len() as FuncId);
                host_fns.push(f.clone());
            }
        }
    }
    let mut device_fns: Vec<IrFunction> = Vec::new();
    let mut device_ids: HashMap<String, FuncId> = HashMap::new();
    if !host_only {
        for u in &units {
            for f in &u.device_fns {
                if device_ids.insert(f.name.clone(), device_fns.len() as FuncId).is_some() {
                    errors.push(LinkError::DuplicateSymbol(f.name.clone()));
                }
                device_fns.push(f.clone());
            }
        }
    }

    // ---- resolve symbols in code --------------------------------------------
    let unit_of_host: Vec<usize> = units
        .iter()
        .enumerate()
        .flat_map(|(ui, u)| {
            u.host_fns
                .iter()
                .filter(|f| retained.contains(f.name.as_str()))
                .map(move |_| ui)
                .collect::<Vec<_>>()
        })
        .collect();
    for (fi, f) in host_fns.iter_mut().enumerate() {
        let ui = unit_of_host[fi];
        let from = f.name.clone();
        rebase_fn(f, record_base[ui], &method_remap[ui]);
        for instr in &mut f.code {
            resolve_instr(
                instr,
                &from,
                true,
                host_only,
                &host_ids,
                &device_ids,
                &global_names,
                &mut errors,
            );
        }
    }
    let unit_of_device: Vec<usize> = units
        .iter()
        .enumerate()
        .flat_map(|(ui, u)| u.device_fns.iter().map(move |_| ui).collect::<Vec<_>>())
        .collect();
    for (fi, f) in device_fns.iter_mut().enumerate() {
        let ui = unit_of_device[fi];
        let from = f.name.clone();
        rebase_fn(f, record_base[ui], &method_remap[ui]);
        for instr in &mut f.code {
            resolve_instr(
                instr,
                &from,
                false,
                host_only,
                &host_ids,
                &device_ids,
                &global_names,
                &mut errors,
            );
        }
    }

    // ---- vtables -----------------------------------------------------------------
    for ri in 0..records.len() {
        let mut seen: Vec<(u32, FuncId)> = Vec::new();
        let mut cur = Some(ri);
        while let Some(i) = cur {
            // find the unit-local RecordPre to get own methods
            let rec_name = records[i].name.clone();
            for u in &units {
                if let Some(rp) = u.records.iter().find(|r| r.name == rec_name) {
                    for m in &rp.own_methods {
                        let mid = intern_method(&mut method_names, m);
                        if seen.iter().any(|(x, _)| *x == mid) {
                            continue; // overridden closer to the dynamic type
                        }
                        let fn_name = format!("{rec_name}%{m}");
                        match host_ids.get(&fn_name) {
                            Some(&fid) => seen.push((mid, fid)),
                            None => errors.push(LinkError::UndefinedSymbol {
                                name: fn_name,
                                from: format!("vtable of {}", records[ri].name),
                            }),
                        }
                    }
                }
            }
            cur = records[i].parent.map(|p| p as usize);
        }
        seen.sort_by_key(|(m, _)| *m);
        records[ri].vtable = seen;
    }

    // ---- entries -----------------------------------------------------------------
    let mut entries = Vec::new();
    if !host_only {
        for (ui, u) in units.iter().enumerate() {
            for e in &u.entries {
                let Some(&device_fn) = device_ids.get(&e.name) else {
                    errors.push(LinkError::UndefinedSymbol {
                        name: e.name.clone(),
                        from: "entry table".into(),
                    });
                    continue;
                };
                let fields = e
                    .captured
                    .iter()
                    .map(|c| CapField {
                        name: c.name.clone(),
                        ty: rebase_ty(
                            super::lower::ty_meta(&c.ty, &unit_record_index(&units[ui])),
                            record_base[ui],
                        ),
                        mode: match c.mode {
                            crate::frontend::ast::CaptureMode::ByValue => CaptureModeMeta::ByValue,
                            crate::frontend::ast::CaptureMode::ByAddress => {
                                CaptureModeMeta::ByAddress
                            }
                        },
                        off: c.offset,
                    })
                    .collect();
                entries.push(EntryMeta {
                    name: e.name.clone(),
                    device_fn,
                    device: e.device,
                    capture: CaptureLayout { fields, size: e.capture_size },
                });
            }
        }
    }

    let host_main = match host_ids.get("main") {
        Some(&id) => id,
        None => {
            errors.push(LinkError::NoMain);
            0
        }
    };

    let warnings: Vec<String> = units.iter().flat_map(|u| u.warnings.iter().cloned()).collect();

    if !errors.is_empty() {
        return Err(errors);
    }
    Ok(ProgramImage {
        format: IMAGE_FORMAT.into(),
        version: IMAGE_VERSION,
        host_functions: host_fns,
        device_functions: device_fns,
        host_main,
        entries,
        globals,
        globals_size,
        records,
        method_names,
        warnings,
    })
}

fn unit_record_index(u: &LoweredUnit) -> HashMap<String, usize> {
    u.records.iter().enumerate().map(|(i, r)| (r.name.clone(), i)).collect()
}

fn rebase_ty(ty: TyMeta, base: u32) -> TyMeta {
    match ty {
        TyMeta::Rec { record } => TyMeta::Rec { record: record + base },
        other => other,
    }
}

/// Rebase unit-local record ids and method-name ids inside a function.
fn rebase_fn(f: &mut IrFunction, rec_base: u32, method_remap: &[u32]) {
    for p in &mut f.params {
        if let ParamMeta::Rec { record } = p {
            *record += rec_base;
        }
    }
    for l in &mut f.locals {
        if let LocalMeta::Rec { record, .. } = l {
            *record += rec_base;
        }
    }
    for instr in &mut f.code {
        match instr {
            Instr::CallVirt { method, .. } => *method = method_remap[*method as usize],
            Instr::CapGet { kind: CapGetKind::Rec { record }, .. } => *record += rec_base,
            _ => {}
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn resolve_instr(
    instr: &mut Instr,
    from: &str,
    is_host: bool,
    host_only: bool,
    host_ids: &HashMap<String, FuncId>,
    device_ids: &HashMap<String, FuncId>,
    global_names: &HashMap<String, u32>,
    errors: &mut Vec<LinkError>,
) {
    let resolve_var = |vr: &mut VarRef, errors: &mut Vec<LinkError>| {
        if let VarRef::GlobSym(name) = vr {
            match global_names.get(name.as_str()) {
                Some(&g) => *vr = VarRef::Glob(g),
                None => errors.push(LinkError::UndefinedSymbol {
                    name: name.clone(),
                    from: from.to_string(),
                }),
            }
        }
    };
    let resolve_call = |fr: &mut FuncRef, errors: &mut Vec<LinkError>| {
        if let FuncRef::Sym(name) = fr {
            let table = if is_host { host_ids } else { device_ids };
            match table.get(name.as_str()) {
                Some(&id) => *fr = FuncRef::Id(id),
                None => {
                    if is_host {
                        errors.push(LinkError::UndefinedSymbol {
                            name: name.clone(),
                            from: from.to_string(),
                        });
                    } else {
                        errors.push(LinkError::UnresolvedDeviceCall {
                            name: name.clone(),
                            from: from.to_string(),
                        });
                    }
                }
            }
        }
    };
    // handles and dispatch targets always name device functions
    let resolve_device = |fr: &mut FuncRef, errors: &mut Vec<LinkError>| {
        if host_only {
            return; // left symbolic; executing raises MissingDeviceCode
        }
        if let FuncRef::Sym(name) = fr {
            match device_ids.get(name.as_str()) {
                Some(&id) => *fr = FuncRef::Id(id),
                None => errors.push(LinkError::HandleTargetNotDevice(name.clone())),
            }
        }
    };
    match instr {
        Instr::Ld(vr) | Instr::St(vr) | Instr::PushRef(vr) | Instr::PushDesc(vr)
        | Instr::PushRec(vr) => resolve_var(vr, errors),
        Instr::LdElem { arr, .. } | Instr::StElem { arr, .. } | Instr::PushRefElem { arr, .. } => {
            resolve_var(arr, errors)
        }
        Instr::LdFld { rec, .. }
        | Instr::StFld { rec, .. }
        | Instr::PushRefFld { rec, .. }
        | Instr::LdFldElem { rec, .. }
        | Instr::StFldElem { rec, .. }
        | Instr::PushRefFldElem { rec, .. } => resolve_var(rec, errors),
        Instr::CapDesc { arr, .. } => resolve_var(arr, errors),
        Instr::CapRec { rec, .. } => resolve_var(rec, errors),
        Instr::Call { f, .. } | Instr::CallNested { f, .. } => resolve_call(f, errors),
        Instr::PushHandle(f) => resolve_device(f, errors),
        Instr::Dispatch { entry, .. } => resolve_device(entry, errors),
        _ => {}
    }
}

//! Lowering from validated AST to the stack-machine IR.
//!
//! The host table gets every non-entry routine (nested routines become
//! separate functions called through the static chain); the device table
//! gets exactly the marked routines plus outlined entries, whose prologues
//! unpack the capture record into their parameter slots.

use std::collections::HashMap;

use crate::frontend::ast::*;
use crate::frontend::sema::{resolve_method, Binding, CallKind, Intrinsic, TypedUnit};
use crate::ir::*;

use super::marking::MarkingSet;
use super::outline::EntryInfo;

/// Frame overhead charged per activation beyond named slots: saved state
/// plus slack for expression temporaries.
pub const FRAME_OVERHEAD: u64 = 32;
pub const TEMP_SLACK: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Host,
    Device,
}

pub struct LoweredSide {
    pub fns: Vec<IrFunction>,
    pub method_names: Vec<String>,
}

pub fn lower_host(typed: &TypedUnit, marking: &MarkingSet) -> LoweredSide {
    let mut lw = Lowerer::new(typed, Side::Host);
    for r in &typed.unit.routines {
        if r.attributes.target_entrypoint {
            continue; // entry bodies never appear in the host table
        }
        lw.lower_toplevel(r, None, None);
    }
    for rec in &typed.unit.record_types {
        for m in &rec.methods {
            lw.lower_toplevel(m, Some(&rec.name), None);
        }
    }
    let _ = marking;
    LoweredSide { fns: lw.fns, method_names: lw.method_names }
}

pub fn lower_device(
    typed: &TypedUnit,
    marking: &MarkingSet,
    entries: &[EntryInfo],
) -> LoweredSide {
    let mut lw = Lowerer::new(typed, Side::Device);
    for r in &typed.unit.routines {
        if r.attributes.target_entrypoint {
            let info = entries.iter().find(|e| e.name == r.name).expect("entry info");
            lw.lower_toplevel(r, None, Some(info));
        } else if marking.contains(&r.name) {
            lw.lower_toplevel(r, None, None);
        }
    }
    for rec in &typed.unit.record_types {
        for m in &rec.methods {
            let qual = format!("{}%{}", rec.name, m.name);
            if marking.contains(&qual) {
                lw.lower_toplevel(m, Some(&rec.name), None);
            }
        }
    }
    LoweredSide { fns: lw.fns, method_names: lw.method_names }
}

struct FrameLayout {
    path: String,
    slots: HashMap<String, u16>,
}

struct Lowerer<'a> {
    typed: &'a TypedUnit,
    side: Side,
    fns: Vec<IrFunction>,
    method_names: Vec<String>,
    /// Top-level routine and extern signatures.
    sigs: HashMap<String, Vec<Type>>,
    /// Method signatures keyed by "DefRec%m" (without receiver).
    method_sigs: HashMap<String, Vec<Type>>,
    frames: Vec<FrameLayout>,
    nested_defs: Vec<Vec<&'a Routine>>,
}

struct FnBuild {
    code: Vec<Instr>,
    params: Vec<ParamMeta>,
    locals: Vec<LocalMeta>,
    agg_bytes: u64,
}

impl FnBuild {
    fn hidden_int(&mut self, nparams: usize) -> u16 {
        self.locals.push(LocalMeta::Scalar(ScalarTy::Int64));
        (nparams + self.locals.len() - 1) as u16
    }
}

impl<'a> Lowerer<'a> {
    fn new(typed: &'a TypedUnit, side: Side) -> Lowerer<'a> {
        let mut sigs = HashMap::new();
        for r in &typed.unit.routines {
            sigs.insert(r.name.clone(), r.params.iter().map(|p| p.ty.clone()).collect());
        }
        for e in &typed.unit.externs {
            sigs.insert(e.name.clone(), e.params.iter().map(|p| p.ty.clone()).collect());
        }
        let mut method_sigs = HashMap::new();
        for rec in &typed.unit.record_types {
            for m in &rec.methods {
                method_sigs.insert(
                    format!("{}%{}", rec.name, m.name),
                    m.params.iter().map(|p| p.ty.clone()).collect(),
                );
            }
        }
        Lowerer {
            typed,
            side,
            fns: Vec::new(),
            method_names: Vec::new(),
            sigs,
            method_sigs,
            frames: Vec::new(),
            nested_defs: Vec::new(),
        }
    }

    fn intern_method(&mut self, name: &str) -> u32 {
        if let Some(i) = self.method_names.iter().position(|m| m == name) {
            return i as u32;
        }
        self.method_names.push(name.to_string());
        (self.method_names.len() - 1) as u32
    }

    fn record_id(&self, name: &str) -> u32 {
        self.typed.info.record_index[name] as u32
    }

    fn field_index(&self, record: &str, field: &str) -> u16 {
        let ri = self.typed.info.record_index[record];
        self.typed.info.records[ri]
            .fields
            .iter()
            .position(|(n, _)| n == field)
            .expect("field resolved by sema") as u16
    }

    fn lower_toplevel(&mut self, r: &'a Routine, method_of: Option<&str>, entry: Option<&EntryInfo>) {
        let name = match method_of {
            Some(rec) => format!("{rec}%{}", r.name),
            None => r.name.clone(),
        };
        self.lower_fn(r, name, method_of, entry, 0);
    }

    #[allow(clippy::too_many_arguments)]
    fn lower_fn(
        &mut self,
        r: &'a Routine,
        path: String,
        method_of: Option<&str>,
        entry: Option<&EntryInfo>,
        depth: u8,
    ) {
        let mut slots: HashMap<String, u16> = HashMap::new();
        let mut params: Vec<ParamMeta> = Vec::new();
        if let Some(rec) = method_of {
            slots.insert("self".into(), 0);
            params.push(ParamMeta::Rec { record: self.record_id(rec) });
        }
        for p in &r.params {
            let slot = params.len() as u16;
            slots.insert(p.name.clone(), slot);
            params.push(match &p.ty {
                Type::Int64 => ParamMeta::Scalar(ScalarTy::Int64),
                Type::Float64 => ParamMeta::Scalar(ScalarTy::Float64),
                Type::RoutineHandle => ParamMeta::Handle,
                Type::Array(elem, shape) => {
                    ParamMeta::Arr { elem: *elem, rank: shape.rank() as u8 }
                }
                Type::Record(rec) => ParamMeta::Rec { record: self.record_id(rec) },
            });
        }
        let mut b = FnBuild { code: Vec::new(), params, locals: Vec::new(), agg_bytes: 0 };
        // locals in declaration order (sema restricts them to body level)
        collect_locals(&r.body, &mut |v: &VarDecl| {
            let slot = (b.params.len() + b.locals.len()) as u16;
            slots.insert(v.name.clone(), slot);
            let meta = match &v.ty {
                Type::Int64 => LocalMeta::Scalar(ScalarTy::Int64),
                Type::Float64 => LocalMeta::Scalar(ScalarTy::Float64),
                Type::RoutineHandle => LocalMeta::Handle,
                Type::Array(elem, shape) => {
                    let (lb, ext) = fixed_shape(shape);
                    let bytes: u64 =
                        ext.iter().take(shape.rank()).map(|e| *e as u64).product::<u64>() * 8;
                    let byte_off = b.agg_bytes;
                    b.agg_bytes += bytes;
                    LocalMeta::Arr { elem: *elem, rank: shape.rank() as u8, lb, ext, byte_off }
                }
                Type::Record(rec) => {
                    let record = self.record_id(rec);
                    let byte_off = b.agg_bytes;
                    b.agg_bytes += self.record_bytes(record);
                    LocalMeta::Rec { record, byte_off }
                }
            };
            b.locals.push(meta);
        });

        self.frames.push(FrameLayout { path: path.clone(), slots });
        self.nested_defs.push(r.nested.iter().collect());

        // entry prologue: unpack the capture record into parameter slots
        if let Some(info) = entry {
            for (i, c) in info.captured.iter().enumerate() {
                let kind = match &c.ty {
                    Type::Int64 => CapGetKind::I64,
                    Type::Float64 => CapGetKind::F64,
                    Type::RoutineHandle => CapGetKind::Handle,
                    Type::Array(..) => CapGetKind::Desc,
                    Type::Record(rec) => CapGetKind::Rec { record: self.record_id(rec) },
                };
                b.code.push(Instr::CapGet { off: c.offset, kind });
                b.code.push(Instr::St(VarRef::Slot(i as u16)));
            }
        }

        self.emit_block(&r.body, &mut b);
        b.code.push(Instr::Ret);

        let n_slots = (b.params.len() + b.locals.len()) as u64;
        let frame_bytes = FRAME_OVERHEAD + 8 * n_slots + TEMP_SLACK + b.agg_bytes;
        let kind = if entry.is_some() {
            FnKind::Entry
        } else if method_of.is_some() {
            FnKind::Method
        } else if depth > 0 {
            FnKind::Nested
        } else {
            FnKind::Plain
        };
        self.fns.push(IrFunction {
            name: path.clone(),
            kind,
            params: b.params,
            locals: b.locals,
            frame_bytes,
            depth,
            code: b.code,
            unit: self.typed.unit.path.clone(),
        });

        // nested routines (host side only; device copies were inlined away)
        if self.side == Side::Host {
            for n in &r.nested {
                let child_path = format!("{path}.{}", n.name);
                self.lower_fn(n, child_path, None, None, depth + 1);
            }
        } else {
            debug_assert!(r.nested.is_empty(), "device functions must be trampoline-free");
        }

        self.nested_defs.pop();
        self.frames.pop();
    }

    fn record_bytes(&self, record: u32) -> u64 {
        let rec = &self.typed.info.records[record as usize];
        let mut size = 8u64; // tag word
        for (_, ty) in &rec.fields {
            size += match ty {
                Type::Int64 | Type::Float64 => 8,
                Type::Array(_, shape) => shape.elem_count().unwrap_or(0) as u64 * 8,
                _ => 8,
            };
        }
        size
    }

    // ---- name resolution ------------------------------------------------

    fn resolve_binding(&self, name: &str, binding: &Binding) -> VarRef {
        match binding {
            Binding::Global(_) => VarRef::GlobSym(name.to_string()),
            Binding::Local { hops } | Binding::Param { hops } => self.resolve_hops(name, *hops),
            Binding::Routine(_) => unreachable!("routine refs are lowered at call sites"),
        }
    }

    fn resolve_hops(&self, name: &str, hops: u8) -> VarRef {
        let idx = self.frames.len() - 1 - hops as usize;
        let slot = *self.frames[idx]
            .slots
            .get(name)
            .unwrap_or_else(|| panic!("slot for '{name}' at hops {hops}"));
        if hops == 0 {
            VarRef::Slot(slot)
        } else {
            VarRef::Chain { hops, slot }
        }
    }

    /// Resolve a bare name (do-loop variables) against the frame stack.
    fn resolve_name(&self, name: &str) -> VarRef {
        for (hops, frame) in self.frames.iter().rev().enumerate() {
            if let Some(&slot) = frame.slots.get(name) {
                return if hops == 0 {
                    VarRef::Slot(slot)
                } else {
                    VarRef::Chain { hops: hops as u8, slot }
                };
            }
        }
        VarRef::GlobSym(name.to_string())
    }

    fn desig_info(&self, d: &Designator) -> &crate::frontend::sema::DesigInfo {
        self.typed
            .info
            .desig
            .get(&d.id)
            .unwrap_or_else(|| panic!("designator '{}' not annotated", d.base))
    }

    // ---- statements -------------------------------------------------------

    fn emit_block(&mut self, block: &'a Block, b: &mut FnBuild) {
        for s in block {
            self.emit_stmt(s, b);
        }
    }

    fn emit_stmt(&mut self, s: &'a Stmt, b: &mut FnBuild) {
        match s {
            Stmt::Local(_) => {}
            Stmt::Assign { target, value, .. } => {
                let vt = self.expr_ty(value);
                let tt = self.desig_info(target).ty.clone();
                self.emit_expr(value, b);
                if tt == Type::Float64 && vt == Type::Int64 {
                    b.code.push(Instr::CastIF);
                }
                self.emit_store(target, b);
            }
            Stmt::Do { var, from, to, step, body, .. } => {
                let var_ref = self.resolve_name(var);
                let end_slot = b.hidden_int(b.params.len());
                let step_slot = b.hidden_int(b.params.len());
                self.emit_expr(from, b);
                b.code.push(Instr::St(var_ref.clone()));
                self.emit_expr(to, b);
                b.code.push(Instr::St(VarRef::Slot(end_slot)));
                match step {
                    Some(e) => self.emit_expr(e, b),
                    None => b.code.push(Instr::PushI(1)),
                }
                b.code.push(Instr::St(VarRef::Slot(step_slot)));
                b.code.push(Instr::Ld(VarRef::Slot(step_slot)));
                let jnz = self.here(b);
                b.code.push(Instr::JmpIfNZ(0));
                b.code.push(Instr::Trap(TrapKind::ZeroStep));
                self.patch(b, jnz);

                let top = b.code.len() as u32;
                b.code.push(Instr::Ld(VarRef::Slot(step_slot)));
                b.code.push(Instr::PushI(0));
                b.code.push(Instr::CmpI(CmpOp::Gt));
                let to_neg = self.here(b);
                b.code.push(Instr::JmpIfZ(0));
                b.code.push(Instr::Ld(var_ref.clone()));
                b.code.push(Instr::Ld(VarRef::Slot(end_slot)));
                b.code.push(Instr::CmpI(CmpOp::Le));
                let to_test = self.here(b);
                b.code.push(Instr::Jmp(0));
                self.patch(b, to_neg);
                b.code.push(Instr::Ld(var_ref.clone()));
                b.code.push(Instr::Ld(VarRef::Slot(end_slot)));
                b.code.push(Instr::CmpI(CmpOp::Ge));
                self.patch(b, to_test);
                let exit_jmp = self.here(b);
                b.code.push(Instr::JmpIfZ(0));

                self.emit_block(body, b);

                b.code.push(Instr::Ld(var_ref.clone()));
                b.code.push(Instr::Ld(VarRef::Slot(step_slot)));
                b.code.push(Instr::AddI);
                b.code.push(Instr::St(var_ref));
                b.code.push(Instr::Jmp(top));
                self.patch(b, exit_jmp);
            }
            Stmt::If { cond, then_body, else_body, .. } => {
                self.emit_expr(cond, b);
                let to_else = self.here(b);
                b.code.push(Instr::JmpIfZ(0));
                self.emit_block(then_body, b);
                match else_body {
                    Some(eb) => {
                        let to_end = self.here(b);
                        b.code.push(Instr::Jmp(0));
                        self.patch(b, to_else);
                        self.emit_block(eb, b);
                        self.patch(b, to_end);
                    }
                    None => self.patch(b, to_else),
                }
            }
            Stmt::Call { callee, args, id, .. } => self.emit_call(callee, args, *id, b),
            Stmt::Return { .. } => b.code.push(Instr::Ret),
            Stmt::Target { .. } => unreachable!("regions are outlined before lowering"),
            Stmt::Master { body, .. } => {
                b.code.push(Instr::CoreId);
                let skip = self.here(b);
                b.code.push(Instr::JmpIfNZ(0));
                self.emit_block(body, b);
                self.patch(b, skip);
            }
            Stmt::Single { body, .. } => {
                b.code.push(Instr::CoreId);
                let skip = self.here(b);
                b.code.push(Instr::JmpIfNZ(0));
                self.emit_block(body, b);
                self.patch(b, skip);
                b.code.push(Instr::Barrier);
            }
            Stmt::Barrier { .. } => b.code.push(Instr::Barrier),
            Stmt::CriticalEnter { .. } => b.code.push(Instr::CritEnter),
            Stmt::CriticalExit { .. } => b.code.push(Instr::CritExit),
            Stmt::DispatchSite { entry, device, captured, .. } => {
                let size: u32 = captured
                    .iter()
                    .map(|c| match c.mode {
                        CaptureMode::ByValue => 8,
                        CaptureMode::ByAddress => match c.ty {
                            Type::Array(..) => DESC_BYTES,
                            _ => 8,
                        },
                    })
                    .sum();
                let cap = b.hidden_int(b.params.len());
                b.code.push(Instr::CapAlloc { size, dst: cap });
                for c in captured {
                    let vr = self.resolve_hops(&c.name, c.hops);
                    match &c.ty {
                        Type::Int64 | Type::Float64 => {
                            b.code.push(Instr::Ld(vr));
                            b.code.push(Instr::CapScalar { cap, off: c.offset });
                        }
                        Type::RoutineHandle => {
                            b.code.push(Instr::Ld(vr));
                            b.code.push(Instr::CapHandle { cap, off: c.offset });
                        }
                        Type::Array(..) => {
                            b.code.push(Instr::CapDesc { cap, off: c.offset, arr: vr });
                        }
                        Type::Record(_) => {
                            b.code.push(Instr::CapRec { cap, off: c.offset, rec: vr });
                        }
                    }
                }
                b.code.push(Instr::Dispatch {
                    entry: FuncRef::Sym(entry.clone()),
                    device: *device as u8,
                    cap,
                });
            }
        }
    }

    fn here(&self, b: &FnBuild) -> usize {
        b.code.len()
    }

    fn patch(&self, b: &mut FnBuild, at: usize) {
        let target = b.code.len() as u32;
        match &mut b.code[at] {
            Instr::Jmp(t) | Instr::JmpIfZ(t) | Instr::JmpIfNZ(t) => *t = target,
            other => panic!("patching non-jump {other:?}"),
        }
    }

    // ---- calls -------------------------------------------------------------

    fn emit_call(&mut self, callee: &'a Callee, args: &'a [Expr], id: NodeId, b: &mut FnBuild) {
        let info = self.typed.info.calls.get(&id).expect("call annotated").clone();
        match &info.kind {
            CallKind::Intrinsic(intr) => self.emit_intrinsic(*intr, &info.spawn_target, args, b),
            CallKind::TopLevel(n) | CallKind::Extern(n) => {
                let sig = self.sigs[n].clone();
                for (ty, a) in sig.iter().zip(args) {
                    self.emit_arg(ty, a, b);
                }
                b.code.push(Instr::Call { f: FuncRef::Sym(n.clone()), argc: args.len() as u8 });
            }
            CallKind::Nested { hops, name } => {
                let idx = self.nested_defs.len() - 1 - *hops as usize;
                let def = self.nested_defs[idx]
                    .iter()
                    .find(|r| r.name == *name)
                    .expect("nested def");
                let sig: Vec<Type> = def.params.iter().map(|p| p.ty.clone()).collect();
                for (ty, a) in sig.iter().zip(args) {
                    self.emit_arg(ty, a, b);
                }
                let path = format!("{}.{}", self.frames[idx].path, name);
                b.code.push(Instr::CallNested {
                    f: FuncRef::Sym(path),
                    hops: *hops,
                    argc: args.len() as u8,
                });
            }
            CallKind::Method { record, method } => {
                let Callee::Method { recv, .. } = callee else { unreachable!() };
                let ri = self.typed.info.record_index[record];
                let def = resolve_method(&self.typed.info.records, ri, method).expect("method");
                let def_rec = self.typed.info.records[def].name.clone();
                let sig = self.method_sigs[&format!("{def_rec}%{method}")].clone();
                let rv = self.desig_info(recv).binding.clone();
                b.code.push(Instr::PushRec(self.resolve_binding(&recv.base, &rv)));
                for (ty, a) in sig.iter().zip(args) {
                    self.emit_arg(ty, a, b);
                }
                let mid = self.intern_method(method);
                b.code.push(Instr::CallVirt { method: mid, argc: (args.len() + 1) as u8 });
            }
            CallKind::DirectMethod { record, method } => {
                let Callee::DirectMethod { recv, .. } = callee else { unreachable!() };
                let sig = self.method_sigs[&format!("{record}%{method}")].clone();
                let rv = self.desig_info(recv).binding.clone();
                b.code.push(Instr::PushRec(self.resolve_binding(&recv.base, &rv)));
                for (ty, a) in sig.iter().zip(args) {
                    self.emit_arg(ty, a, b);
                }
                b.code.push(Instr::Call {
                    f: FuncRef::Sym(format!("{record}%{method}")),
                    argc: (args.len() + 1) as u8,
                });
            }
        }
    }

    fn emit_intrinsic(
        &mut self,
        intr: Intrinsic,
        spawn_target: &Option<String>,
        args: &'a [Expr],
        b: &mut FnBuild,
    ) {
        match intr {
            Intrinsic::GetCoreid => {
                b.code.push(Instr::CoreId);
                let Expr::Desig(d) = &args[0] else { unreachable!() };
                self.emit_store(d, b);
            }
            Intrinsic::GetVnestid => {
                for a in args {
                    let Expr::Desig(d) = a else { unreachable!() };
                    self.emit_push_ref(d, b);
                }
                b.code.push(Instr::VnestId);
            }
            Intrinsic::ReadInt64 => {
                let Expr::Desig(d) = &args[0] else { unreachable!() };
                self.emit_push_ref(d, b);
                b.code.push(Instr::ReadI64);
            }
            Intrinsic::PrintInt64 => {
                self.emit_expr(&args[0], b);
                b.code.push(Instr::PrintI64);
            }
            Intrinsic::PrintFloat64 => {
                self.emit_expr(&args[0], b);
                b.code.push(Instr::PrintF64);
            }
            Intrinsic::Spawn => {
                match spawn_target {
                    Some(n) => b.code.push(Instr::PushHandle(FuncRef::Sym(n.clone()))),
                    None => self.emit_expr(&args[0], b),
                }
                let Expr::Desig(d) = &args[1] else { unreachable!() };
                let bi = self.desig_info(d).binding.clone();
                b.code.push(Instr::PushRec(self.resolve_binding(&d.base, &bi)));
                b.code.push(Instr::Spawn);
            }
            Intrinsic::Join => b.code.push(Instr::Join),
        }
    }

    /// Push one call argument according to the parameter type.
    fn emit_arg(&mut self, param_ty: &Type, a: &'a Expr, b: &mut FnBuild) {
        match param_ty {
            Type::Int64 | Type::Float64 | Type::RoutineHandle => match a {
                Expr::Desig(d) => self.emit_push_ref(d, b),
                other => {
                    self.emit_expr(other, b);
                    b.code.push(Instr::PushTemp);
                }
            },
            Type::Array(..) => {
                let Expr::Desig(d) = a else { unreachable!("checked by sema") };
                let bi = self.desig_info(d).binding.clone();
                b.code.push(Instr::PushDesc(self.resolve_binding(&d.base, &bi)));
            }
            Type::Record(_) => {
                let Expr::Desig(d) = a else { unreachable!("checked by sema") };
                let bi = self.desig_info(d).binding.clone();
                b.code.push(Instr::PushRec(self.resolve_binding(&d.base, &bi)));
            }
        }
    }

    // ---- designators -------------------------------------------------------

    fn expr_ty(&self, e: &Expr) -> Type {
        self.typed.info.expr_ty.get(&e.id()).cloned().unwrap_or(Type::Int64)
    }

    fn emit_expr(&mut self, e: &'a Expr, b: &mut FnBuild) {
        match e {
            Expr::Int(v, ..) => b.code.push(Instr::PushI(*v)),
            Expr::Float(v, ..) => b.code.push(Instr::PushF(*v)),
            Expr::HandleOf { routine, .. } => {
                b.code.push(Instr::PushHandle(FuncRef::Sym(routine.clone())))
            }
            Expr::Desig(d) => self.emit_load(d, b),
            Expr::Unary { op, expr, .. } => {
                self.emit_expr(expr, b);
                match (op, self.expr_ty(expr)) {
                    (UnOp::Neg, Type::Float64) => b.code.push(Instr::NegF),
                    (UnOp::Neg, _) => b.code.push(Instr::NegI),
                    (UnOp::Not, _) => b.code.push(Instr::NotL),
                }
            }
            Expr::Binary { op, lhs, rhs, .. } => {
                let lt = self.expr_ty(lhs);
                let rt = self.expr_ty(rhs);
                let float = lt == Type::Float64 || rt == Type::Float64;
                self.emit_expr(lhs, b);
                if float && lt == Type::Int64 {
                    b.code.push(Instr::CastIF);
                }
                self.emit_expr(rhs, b);
                if float && rt == Type::Int64 {
                    b.code.push(Instr::CastIF);
                }
                let instr = match (op, float) {
                    (BinOp::Add, false) => Instr::AddI,
                    (BinOp::Sub, false) => Instr::SubI,
                    (BinOp::Mul, false) => Instr::MulI,
                    (BinOp::Div, false) => Instr::DivI,
                    (BinOp::Mod, false) => Instr::ModI,
                    (BinOp::Add, true) => Instr::AddF,
                    (BinOp::Sub, true) => Instr::SubF,
                    (BinOp::Mul, true) => Instr::MulF,
                    (BinOp::Div, true) => Instr::DivF,
                    (BinOp::Mod, true) => unreachable!("mod is int-only"),
                    (BinOp::And, _) => Instr::AndL,
                    (BinOp::Or, _) => Instr::OrL,
                    (cmp, false) => Instr::CmpI(cmp_op(*cmp)),
                    (cmp, true) => Instr::CmpF(cmp_op(*cmp)),
                };
                b.code.push(instr);
            }
        }
    }

    fn emit_load(&mut self, d: &'a Designator, b: &mut FnBuild) {
        let info = self.desig_info(d).clone();
        let vr = self.resolve_binding(&d.base, &info.binding);
        match &d.parts[..] {
            [] => b.code.push(Instr::Ld(vr)),
            [DesigPart::Index(idx)] => {
                for e in idx {
                    self.emit_expr(e, b);
                }
                b.code.push(Instr::LdElem { arr: vr, rank: idx.len() as u8 });
            }
            [DesigPart::Field(f)] => {
                let rec = record_name(&info.base_ty);
                let field = self.field_index(rec, f);
                b.code.push(Instr::LdFld { rec: vr, field });
            }
            [DesigPart::Field(f), DesigPart::Index(idx)] => {
                let rec = record_name(&info.base_ty);
                let field = self.field_index(rec, f);
                for e in idx {
                    self.emit_expr(e, b);
                }
                b.code.push(Instr::LdFldElem { rec: vr, field, rank: idx.len() as u8 });
            }
            other => unreachable!("designator shape {other:?}"),
        }
    }

    /// Store the value on top of the stack into the designator.
    fn emit_store(&mut self, d: &'a Designator, b: &mut FnBuild) {
        let info = self.desig_info(d).clone();
        let vr = self.resolve_binding(&d.base, &info.binding);
        match &d.parts[..] {
            [] => b.code.push(Instr::St(vr)),
            [DesigPart::Index(idx)] => {
                for e in idx {
                    self.emit_expr(e, b);
                }
                b.code.push(Instr::StElem { arr: vr, rank: idx.len() as u8 });
            }
            [DesigPart::Field(f)] => {
                let rec = record_name(&info.base_ty);
                let field = self.field_index(rec, f);
                b.code.push(Instr::StFld { rec: vr, field });
            }
            [DesigPart::Field(f), DesigPart::Index(idx)] => {
                let rec = record_name(&info.base_ty);
                let field = self.field_index(rec, f);
                for e in idx {
                    self.emit_expr(e, b);
                }
                b.code.push(Instr::StFldElem { rec: vr, field, rank: idx.len() as u8 });
            }
            other => unreachable!("designator shape {other:?}"),
        }
    }

    fn emit_push_ref(&mut self, d: &'a Designator, b: &mut FnBuild) {
        let info = self.desig_info(d).clone();
        let vr = self.resolve_binding(&d.base, &info.binding);
        match &d.parts[..] {
            [] => b.code.push(Instr::PushRef(vr)),
            [DesigPart::Index(idx)] => {
                for e in idx {
                    self.emit_expr(e, b);
                }
                b.code.push(Instr::PushRefElem { arr: vr, rank: idx.len() as u8 });
            }
            [DesigPart::Field(f)] => {
                let rec = record_name(&info.base_ty);
                let field = self.field_index(rec, f);
                b.code.push(Instr::PushRefFld { rec: vr, field });
            }
            [DesigPart::Field(f), DesigPart::Index(idx)] => {
                let rec = record_name(&info.base_ty);
                let field = self.field_index(rec, f);
                for e in idx {
                    self.emit_expr(e, b);
                }
                b.code.push(Instr::PushRefFldElem { rec: vr, field, rank: idx.len() as u8 });
            }
            other => unreachable!("designator shape {other:?}"),
        }
    }
}

fn cmp_op(op: BinOp) -> CmpOp {
    match op {
        BinOp::Eq => CmpOp::Eq,
        BinOp::Ne => CmpOp::Ne,
        BinOp::Lt => CmpOp::Lt,
        BinOp::Le => CmpOp::Le,
        BinOp::Gt => CmpOp::Gt,
        BinOp::Ge => CmpOp::Ge,
        other => unreachable!("{other:?} is not a comparison"),
    }
}

fn record_name(ty: &Type) -> &str {
    match ty {
        Type::Record(n) => n,
        other => unreachable!("expected record, got {}", other.display()),
    }
}

fn fixed_shape(shape: &ArrayShape) -> ([i64; 3], [i64; 3]) {
    let mut lb = [1i64; 3];
    let mut ext = [1i64; 3];
    for (k, e) in shape.extents.iter().enumerate() {
        let Extent::Fixed { lb: l, ub } = e else { unreachable!("local arrays are fixed-shape") };
        lb[k] = *l;
        ext[k] = ub - l + 1;
    }
    (lb, ext)
}

fn collect_locals(block: &Block, f: &mut impl FnMut(&VarDecl)) {
    for s in block {
        match s {
            Stmt::Local(v) => f(v),
            Stmt::Do { body, .. } => collect_locals(body, f),
            Stmt::If { then_body, else_body, .. } => {
                collect_locals(then_body, f);
                if let Some(b) = else_body {
                    collect_locals(b, f);
                }
            }
            Stmt::Master { body, .. } | Stmt::Single { body, .. } => collect_locals(body, f),
            Stmt::Target { body, .. } => collect_locals(body, f),
            _ => {}
        }
    }
}

/// Convert an AST type to serialized type metadata with unit-local record ids.
pub fn ty_meta(ty: &Type, record_index: &HashMap<String, usize>) -> TyMeta {
    match ty {
        Type::Int64 => TyMeta::I64,
        Type::Float64 => TyMeta::F64,
        Type::RoutineHandle => TyMeta::Handle,
        Type::Array(elem, shape) => {
            let (lb, ext) = if shape.is_fixed() {
                fixed_shape(shape)
            } else {
                ([1; 3], [0; 3])
            };
            TyMeta::Arr { elem: *elem, rank: shape.rank() as u8, lb, ext }
        }
        Type::Record(name) => TyMeta::Rec { record: record_index[name] as u32 },
    }
}

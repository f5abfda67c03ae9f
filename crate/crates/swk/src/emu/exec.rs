//! Stack-machine execution of linked IR functions on one core.

use crate::frontend::ast::ScalarTy;
use crate::ir::*;

use super::memory::{Addr, Space};
use super::{Chip, FaultKind, GlobalCell, Proto};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Host,
    Device,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Value {
    I(i64),
    F(f64),
    /// Routine handle (wire encoding: device id + 1; 0 is null).
    H(u64),
}

impl Value {
    fn bits(self) -> u64 {
        match self {
            Value::I(v) => v as u64,
            Value::F(v) => v.to_bits(),
            Value::H(v) => v,
        }
    }

    fn as_i(self) -> i64 {
        match self {
            Value::I(v) => v,
            other => panic!("expected int, got {other:?}"),
        }
    }

    fn as_f(self) -> f64 {
        match self {
            Value::F(v) => v,
            other => panic!("expected float, got {other:?}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum ScalarKind {
    I,
    F,
    H,
}

#[derive(Debug, Clone, Copy)]
pub struct ArrDesc {
    pub base: Addr,
    pub elem: ScalarTy,
    pub rank: u8,
    pub lb: [i64; 3],
    pub ext: [i64; 3],
}

impl ArrDesc {
    fn flat(&self, idx: &[i64]) -> Result<u64, FaultKind> {
        let mut off = 0i64;
        let mut stride = 1i64;
        for k in 0..self.rank as usize {
            let i = idx[k];
            if i < self.lb[k] || i >= self.lb[k] + self.ext[k] {
                return Err(FaultKind::OutOfBounds(format!(
                    "subscript {} = {} outside {}..{}",
                    k + 1,
                    i,
                    self.lb[k],
                    self.lb[k] + self.ext[k] - 1
                )));
            }
            off += (i - self.lb[k]) * stride;
            stride *= self.ext[k];
        }
        Ok(off as u64 * 8)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RecHandle {
    pub addr: Addr,
    /// Static record id; the tag word in memory carries the dynamic type.
    pub record: u32,
}

#[derive(Debug, Clone)]
pub(crate) enum Slot {
    Val(Value),
    Ref(Place),
    Desc(ArrDesc),
    Rec(RecHandle),
    Null,
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Place {
    Slot { frame: u32, slot: u16 },
    Temp { frame: u32, idx: u16 },
    Mem { addr: Addr, kind: ScalarKind },
}

#[derive(Debug, Clone)]
pub(crate) enum StackVal {
    V(Value),
    P(Place),
    D(ArrDesc),
    R(RecHandle),
}

#[derive(Debug)]
pub(crate) struct Frame {
    pub func: FuncId,
    pub side: Side,
    pub ip: usize,
    pub slots: Vec<Slot>,
    pub temps: Vec<Value>,
    pub eval: Vec<StackVal>,
    pub static_link: Option<u32>,
    pub frame_bytes: u64,
    /// Base of this frame's aggregate byte area on the stack.
    pub agg_base: Addr,
    /// Source of capture-record fields for entry prologues.
    pub capture_src: Option<Addr>,
}

#[derive(Debug, Default)]
pub struct Exec {
    pub(crate) frames: Vec<Frame>,
}

impl Exec {
    pub fn new() -> Exec {
        Exec { frames: Vec::new() }
    }
}

pub(crate) enum ExecOut {
    Cont,
    /// All frames returned.
    Done,
    /// Arrived at a directive barrier (cache already flushed).
    BarrierArrive,
}

impl Chip {
    fn func(&self, side: Side, id: FuncId) -> &IrFunction {
        match side {
            Side::Host => &self.image.host_functions[id as usize],
            Side::Device => &self.image.device_functions[id as usize],
        }
    }

    /// Cost of one value-slot access for this core's current stack placement.
    fn slot_cost(&self, core: usize) -> u64 {
        if self.is_mpe(core) || self.cores[core].device == 0 {
            self.cost().ldm_access
        } else {
            self.cost().main_memory_access
        }
    }

    fn stack_limits(&self, core: usize) -> (Addr, u64) {
        if self.is_mpe(core) {
            (Addr::main(self.layout.mpe_stack_base), self.cfg.mpe_stack_bytes)
        } else if self.cores[core].device == 0 {
            (Addr::ldm(core as u8, self.layout.ldm_stack_base), self.cfg.ldm_stack_bytes)
        } else {
            (
                Addr::main(self.layout.dev1_base + core as u64 * self.cfg.device1_stack_bytes),
                self.cfg.device1_stack_bytes,
            )
        }
    }

    /// Build an activation frame, charging stack space.
    pub(crate) fn build_frame(
        &mut self,
        core: usize,
        side: Side,
        id: FuncId,
        args: Vec<StackVal>,
    ) -> Result<Frame, FaultKind> {
        let f = self.func(side, id);
        let frame_bytes = f.frame_bytes;
        let params = f.params.clone();
        let locals = f.locals.clone();
        let (stack_base, stack_limit) = self.stack_limits(core);
        let sp = self.cores[core].sp;
        if sp + frame_bytes > stack_limit {
            return Err(FaultKind::StackOverflow {
                device: if self.is_mpe(core) { 0 } else { self.cores[core].device },
                used: sp + frame_bytes,
                limit: stack_limit,
            });
        }
        let agg_base = stack_base.add(sp);
        self.cores[core].sp = sp + frame_bytes;

        let mut slots: Vec<Slot> = Vec::with_capacity(params.len() + locals.len());
        for (i, p) in params.iter().enumerate() {
            let slot = match args.get(i) {
                Some(StackVal::V(v)) => Slot::Val(*v),
                Some(StackVal::P(p)) => Slot::Ref(*p),
                Some(StackVal::D(d)) => Slot::Desc(*d),
                Some(StackVal::R(r)) => Slot::Rec(*r),
                None => Slot::Null, // filled by an entry prologue
            };
            // sanity: argument kind must fit the parameter
            match (&slot, p) {
                (Slot::Null, _) => {}
                (Slot::Val(_) | Slot::Ref(_), ParamMeta::Scalar(_) | ParamMeta::Handle) => {}
                (Slot::Desc(_), ParamMeta::Arr { .. }) => {}
                (Slot::Rec(_), ParamMeta::Rec { .. }) => {}
                (got, want) => {
                    return Err(FaultKind::IllegalInstruction(format!(
                        "argument {got:?} does not match parameter {want:?}"
                    )))
                }
            }
            slots.push(slot);
        }
        // zero the aggregate area so every run is deterministic
        let mut agg_total = 0u64;
        for l in &locals {
            match l {
                LocalMeta::Arr { rank, ext, byte_off, .. } => {
                    let bytes: u64 =
                        (0..*rank as usize).map(|k| ext[k].max(0) as u64).product::<u64>() * 8;
                    agg_total = agg_total.max(byte_off + bytes);
                }
                LocalMeta::Rec { record, byte_off } => {
                    let bytes = self.image.records[*record as usize].size;
                    agg_total = agg_total.max(byte_off + bytes);
                }
                _ => {}
            }
        }
        if agg_total > 0 {
            self.zero_range(agg_base, agg_total)?;
        }
        for l in &locals {
            let slot = match l {
                LocalMeta::Scalar(ScalarTy::Int64) => Slot::Val(Value::I(0)),
                LocalMeta::Scalar(ScalarTy::Float64) => Slot::Val(Value::F(0.0)),
                LocalMeta::Handle => Slot::Val(Value::H(0)),
                LocalMeta::Arr { elem, rank, lb, ext, byte_off } => Slot::Desc(ArrDesc {
                    base: agg_base.add(*byte_off),
                    elem: *elem,
                    rank: *rank,
                    lb: *lb,
                    ext: *ext,
                }),
                LocalMeta::Rec { record, byte_off } => {
                    let addr = agg_base.add(*byte_off);
                    // dynamic type tag
                    let tag = (*record as u64) + 1;
                    match addr.space {
                        Space::Main => {
                            let o = addr.off as usize;
                            self.main[o..o + 8].copy_from_slice(&tag.to_le_bytes());
                        }
                        Space::Ldm(c) => {
                            let o = addr.off as usize;
                            self.ldms[c as usize][o..o + 8].copy_from_slice(&tag.to_le_bytes());
                        }
                    }
                    Slot::Rec(RecHandle { addr, record: *record })
                }
            };
            slots.push(slot);
        }
        Ok(Frame {
            func: id,
            side,
            ip: 0,
            slots,
            temps: Vec::new(),
            eval: Vec::new(),
            static_link: None,
            frame_bytes,
            agg_base,
            capture_src: None,
        })
    }

    fn pop_frame(&mut self, core: usize, exec: &mut Exec) {
        if let Some(f) = exec.frames.pop() {
            self.cores[core].sp -= f.frame_bytes;
        }
    }

    // ---- slot/place plumbing ------------------------------------------------

    fn chain_frame(&self, exec: &Exec, hops: u8) -> u32 {
        let mut idx = (exec.frames.len() - 1) as u32;
        for _ in 0..hops {
            idx = self.frame_link(exec, idx);
        }
        idx
    }

    fn frame_link(&self, exec: &Exec, idx: u32) -> u32 {
        exec.frames[idx as usize].static_link.expect("static link present")
    }

    fn slot_of(&self, exec: &Exec, vr: &VarRef) -> Result<(u32, u16), FaultKind> {
        match vr {
            VarRef::Slot(s) => Ok(((exec.frames.len() - 1) as u32, *s)),
            VarRef::Chain { hops, slot } => Ok((self.chain_frame(exec, *hops), *slot)),
            VarRef::Glob(_) | VarRef::GlobSym(_) => {
                Err(FaultKind::IllegalInstruction("global used as slot".into()))
            }
        }
    }

    fn read_slot_value(
        &mut self,
        core: usize,
        exec: &Exec,
        frame: u32,
        slot: u16,
    ) -> Result<Value, FaultKind> {
        match &exec.frames[frame as usize].slots[slot as usize] {
            Slot::Val(v) => {
                let c = self.slot_cost(core);
                self.charge(core, c);
                Ok(*v)
            }
            Slot::Ref(p) => {
                let p = *p;
                self.place_read(core, exec, p)
            }
            Slot::Null => Err(FaultKind::IllegalInstruction("read of unset slot".into())),
            other => Err(FaultKind::IllegalInstruction(format!("scalar read of {other:?}"))),
        }
    }

    fn write_slot_value(
        &mut self,
        core: usize,
        exec: &mut Exec,
        frame: u32,
        slot: u16,
        v: Value,
    ) -> Result<(), FaultKind> {
        let cur = exec.frames[frame as usize].slots[slot as usize].clone();
        match cur {
            Slot::Ref(p) => self.place_write(core, exec, p, v),
            Slot::Val(_) | Slot::Null => {
                let c = self.slot_cost(core);
                self.charge(core, c);
                exec.frames[frame as usize].slots[slot as usize] = Slot::Val(v);
                Ok(())
            }
            other => Err(FaultKind::IllegalInstruction(format!("scalar write to {other:?}"))),
        }
    }

    fn place_read(&mut self, core: usize, exec: &Exec, p: Place) -> Result<Value, FaultKind> {
        match p {
            Place::Slot { frame, slot } => {
                match &exec.frames[frame as usize].slots[slot as usize] {
                    Slot::Val(v) => {
                        let c = self.slot_cost(core);
                        self.charge(core, c);
                        Ok(*v)
                    }
                    Slot::Ref(inner) => {
                        let inner = *inner;
                        self.place_read(core, exec, inner)
                    }
                    other => {
                        Err(FaultKind::IllegalInstruction(format!("place read of {other:?}")))
                    }
                }
            }
            Place::Temp { frame, idx } => {
                let c = self.slot_cost(core);
                self.charge(core, c);
                Ok(exec.frames[frame as usize].temps[idx as usize])
            }
            Place::Mem { addr, kind } => {
                let bits = self.scalar_read(core, addr)?;
                Ok(match kind {
                    ScalarKind::I => Value::I(bits as i64),
                    ScalarKind::F => Value::F(f64::from_bits(bits)),
                    ScalarKind::H => Value::H(bits),
                })
            }
        }
    }

    fn place_write(
        &mut self,
        core: usize,
        exec: &mut Exec,
        p: Place,
        v: Value,
    ) -> Result<(), FaultKind> {
        match p {
            Place::Slot { frame, slot } => {
                let cur = exec.frames[frame as usize].slots[slot as usize].clone();
                match cur {
                    Slot::Ref(inner) => self.place_write(core, exec, inner, v),
                    Slot::Val(_) | Slot::Null => {
                        let c = self.slot_cost(core);
                        self.charge(core, c);
                        exec.frames[frame as usize].slots[slot as usize] = Slot::Val(v);
                        Ok(())
                    }
                    other => {
                        Err(FaultKind::IllegalInstruction(format!("place write to {other:?}")))
                    }
                }
            }
            Place::Temp { frame, idx } => {
                let c = self.slot_cost(core);
                self.charge(core, c);
                exec.frames[frame as usize].temps[idx as usize] = v;
                Ok(())
            }
            Place::Mem { addr, .. } => self.scalar_write(core, addr, v.bits()),
        }
    }

    fn resolve_desc(&mut self, core: usize, exec: &Exec, vr: &VarRef) -> Result<ArrDesc, FaultKind> {
        match vr {
            VarRef::Glob(g) => match &self.globals[*g as usize] {
                GlobalCell::Arr(d) => Ok(*d),
                other => Err(FaultKind::IllegalInstruction(format!("global {other:?} as array"))),
            },
            other => {
                let (frame, slot) = self.slot_of(exec, other)?;
                match &exec.frames[frame as usize].slots[slot as usize] {
                    Slot::Desc(d) => {
                        let c = self.slot_cost(core);
                        self.charge(core, c);
                        Ok(*d)
                    }
                    bad => Err(FaultKind::IllegalInstruction(format!("array read of {bad:?}"))),
                }
            }
        }
    }

    fn resolve_rec(&mut self, core: usize, exec: &Exec, vr: &VarRef) -> Result<RecHandle, FaultKind> {
        match vr {
            VarRef::Glob(g) => match &self.globals[*g as usize] {
                GlobalCell::Rec(r) => Ok(*r),
                other => Err(FaultKind::IllegalInstruction(format!("global {other:?} as record"))),
            },
            other => {
                let (frame, slot) = self.slot_of(exec, other)?;
                match &exec.frames[frame as usize].slots[slot as usize] {
                    Slot::Rec(r) => {
                        let c = self.slot_cost(core);
                        self.charge(core, c);
                        Ok(*r)
                    }
                    bad => Err(FaultKind::IllegalInstruction(format!("record read of {bad:?}"))),
                }
            }
        }
    }

    fn global_scalar_place(&self, g: u32) -> Result<Place, FaultKind> {
        match &self.globals[g as usize] {
            GlobalCell::Scalar { addr, float } => Ok(Place::Mem {
                addr: Addr::main(*addr),
                kind: if *float { ScalarKind::F } else { ScalarKind::I },
            }),
            GlobalCell::Handle { addr } => {
                Ok(Place::Mem { addr: Addr::main(*addr), kind: ScalarKind::H })
            }
            other => Err(FaultKind::IllegalInstruction(format!("global {other:?} as scalar"))),
        }
    }

    fn scalar_place(&mut self, exec: &Exec, vr: &VarRef) -> Result<Place, FaultKind> {
        match vr {
            VarRef::Glob(g) => self.global_scalar_place(*g),
            other => {
                let (frame, slot) = self.slot_of(exec, other)?;
                Ok(Place::Slot { frame, slot })
            }
        }
    }

    fn pop_v(exec: &mut Exec) -> Result<Value, FaultKind> {
        match exec.frames.last_mut().unwrap().eval.pop() {
            Some(StackVal::V(v)) => Ok(v),
            other => Err(FaultKind::IllegalInstruction(format!("expected value, got {other:?}"))),
        }
    }

    fn pop_place(exec: &mut Exec) -> Result<Place, FaultKind> {
        match exec.frames.last_mut().unwrap().eval.pop() {
            Some(StackVal::P(p)) => Ok(p),
            other => Err(FaultKind::IllegalInstruction(format!("expected place, got {other:?}"))),
        }
    }

    fn pop_indices(exec: &mut Exec, rank: u8) -> Result<Vec<i64>, FaultKind> {
        let mut idx = vec![0i64; rank as usize];
        for k in (0..rank as usize).rev() {
            idx[k] = Self::pop_v(exec)?.as_i();
        }
        Ok(idx)
    }

    fn push(exec: &mut Exec, v: StackVal) {
        exec.frames.last_mut().unwrap().eval.push(v);
    }

    fn elem_place(
        &mut self,
        core: usize,
        exec: &mut Exec,
        arr: &VarRef,
        rank: u8,
    ) -> Result<(Addr, ScalarKind), FaultKind> {
        let idx = Self::pop_indices(exec, rank)?;
        let d = self.resolve_desc(core, exec, arr)?;
        let off = d.flat(&idx)?;
        let kind = match d.elem {
            ScalarTy::Int64 => ScalarKind::I,
            ScalarTy::Float64 => ScalarKind::F,
        };
        Ok((d.base.add(off), kind))
    }

    fn field_meta(&self, rec: &RecHandle, field: u16) -> &FieldMeta {
        &self.image.records[rec.record as usize].fields[field as usize]
    }

    fn fld_place(&mut self, rec: RecHandle, field: u16) -> (Addr, ScalarKind) {
        let meta = self.field_meta(&rec, field);
        let kind = match meta.ty {
            TyMeta::F64 => ScalarKind::F,
            _ => ScalarKind::I,
        };
        (rec.addr.add(meta.off), kind)
    }

    fn fld_elem_place(
        &mut self,
        core: usize,
        exec: &mut Exec,
        recref: &VarRef,
        field: u16,
        rank: u8,
    ) -> Result<(Addr, ScalarKind), FaultKind> {
        let idx = Self::pop_indices(exec, rank)?;
        let rec = self.resolve_rec(core, exec, recref)?;
        let meta = self.field_meta(&rec, field).clone();
        let TyMeta::Arr { elem, rank: frank, lb, ext } = meta.ty else {
            return Err(FaultKind::IllegalInstruction("indexed scalar field".into()));
        };
        debug_assert_eq!(frank, rank);
        let d = ArrDesc { base: rec.addr.add(meta.off), elem, rank, lb, ext };
        let off = d.flat(&idx)?;
        let kind = match elem {
            ScalarTy::Int64 => ScalarKind::I,
            ScalarTy::Float64 => ScalarKind::F,
        };
        Ok((d.base.add(off), kind))
    }

    // ---- one instruction -------------------------------------------------------

    pub(crate) fn exec_one(&mut self, core: usize, exec: &mut Exec) -> Result<ExecOut, FaultKind> {
        let Some(frame) = exec.frames.last() else {
            return Ok(ExecOut::Done);
        };
        let side = frame.side;
        let func = frame.func;
        let ip = frame.ip;
        let code = &self.func(side, func).code;
        if ip >= code.len() {
            // defensive: lowering always ends with Ret
            self.pop_frame(core, exec);
            return Ok(if exec.frames.is_empty() { ExecOut::Done } else { ExecOut::Cont });
        }
        let instr = code[ip].clone();
        let base = self.cost().instruction;
        self.charge(core, base);
        exec.frames.last_mut().unwrap().ip += 1;

        match instr {
            Instr::PushI(v) => Self::push(exec, StackVal::V(Value::I(v))),
            Instr::PushF(v) => Self::push(exec, StackVal::V(Value::F(v))),
            Instr::PushHandle(f) => match f {
                FuncRef::Id(id) => Self::push(exec, StackVal::V(Value::H(id as u64 + 1))),
                FuncRef::Sym(_) => return Err(FaultKind::MissingDeviceCode),
            },
            Instr::Ld(vr) => {
                let v = match &vr {
                    VarRef::Glob(g) => {
                        let p = self.global_scalar_place(*g)?;
                        self.place_read(core, exec, p)?
                    }
                    other => {
                        let (frame, slot) = self.slot_of(exec, other)?;
                        self.read_slot_value(core, exec, frame, slot)?
                    }
                };
                Self::push(exec, StackVal::V(v));
            }
            Instr::St(vr) => {
                let top = exec.frames.last_mut().unwrap().eval.pop();
                match top {
                    Some(StackVal::V(v)) => match &vr {
                        VarRef::Glob(g) => {
                            let p = self.global_scalar_place(*g)?;
                            self.place_write(core, exec, p, v)?;
                        }
                        other => {
                            let (frame, slot) = self.slot_of(exec, other)?;
                            self.write_slot_value(core, exec, frame, slot, v)?;
                        }
                    },
                    // entry prologues store descriptors/records into slots
                    Some(StackVal::D(d)) => {
                        let (frame, slot) = self.slot_of(exec, &vr)?;
                        exec.frames[frame as usize].slots[slot as usize] = Slot::Desc(d);
                    }
                    Some(StackVal::R(r)) => {
                        let (frame, slot) = self.slot_of(exec, &vr)?;
                        exec.frames[frame as usize].slots[slot as usize] = Slot::Rec(r);
                    }
                    other => {
                        return Err(FaultKind::IllegalInstruction(format!("St of {other:?}")))
                    }
                }
            }
            Instr::LdElem { arr, rank } => {
                let (addr, kind) = self.elem_place(core, exec, &arr, rank)?;
                let v = self.place_read(core, exec, Place::Mem { addr, kind })?;
                Self::push(exec, StackVal::V(v));
            }
            Instr::StElem { arr, rank } => {
                let (addr, kind) = self.elem_place(core, exec, &arr, rank)?;
                let v = Self::pop_v(exec)?;
                self.place_write(core, exec, Place::Mem { addr, kind }, v)?;
            }
            Instr::LdFld { rec, field } => {
                let r = self.resolve_rec(core, exec, &rec)?;
                let (addr, kind) = self.fld_place(r, field);
                let v = self.place_read(core, exec, Place::Mem { addr, kind })?;
                Self::push(exec, StackVal::V(v));
            }
            Instr::StFld { rec, field } => {
                let r = self.resolve_rec(core, exec, &rec)?;
                let (addr, kind) = self.fld_place(r, field);
                let v = Self::pop_v(exec)?;
                self.place_write(core, exec, Place::Mem { addr, kind }, v)?;
            }
            Instr::LdFldElem { rec, field, rank } => {
                let (addr, kind) = self.fld_elem_place(core, exec, &rec, field, rank)?;
                let v = self.place_read(core, exec, Place::Mem { addr, kind })?;
                Self::push(exec, StackVal::V(v));
            }
            Instr::StFldElem { rec, field, rank } => {
                let (addr, kind) = self.fld_elem_place(core, exec, &rec, field, rank)?;
                let v = Self::pop_v(exec)?;
                self.place_write(core, exec, Place::Mem { addr, kind }, v)?;
            }
            Instr::AddI | Instr::SubI | Instr::MulI | Instr::DivI | Instr::ModI => {
                let b = Self::pop_v(exec)?.as_i();
                let a = Self::pop_v(exec)?.as_i();
                let v = match instr {
                    Instr::AddI => a.wrapping_add(b),
                    Instr::SubI => a.wrapping_sub(b),
                    Instr::MulI => a.wrapping_mul(b),
                    Instr::DivI => {
                        if b == 0 {
                            return Err(FaultKind::DivideByZero);
                        }
                        a.wrapping_div(b)
                    }
                    Instr::ModI => {
                        if b == 0 {
                            return Err(FaultKind::DivideByZero);
                        }
                        a.wrapping_rem(b)
                    }
                    _ => unreachable!(),
                };
                Self::push(exec, StackVal::V(Value::I(v)));
            }
            Instr::NegI => {
                let a = Self::pop_v(exec)?.as_i();
                Self::push(exec, StackVal::V(Value::I(a.wrapping_neg())));
            }
            Instr::AddF | Instr::SubF | Instr::MulF | Instr::DivF => {
                let b = Self::pop_v(exec)?.as_f();
                let a = Self::pop_v(exec)?.as_f();
                let v = match instr {
                    Instr::AddF => a + b,
                    Instr::SubF => a - b,
                    Instr::MulF => a * b,
                    Instr::DivF => a / b,
                    _ => unreachable!(),
                };
                Self::push(exec, StackVal::V(Value::F(v)));
            }
            Instr::NegF => {
                let a = Self::pop_v(exec)?.as_f();
                Self::push(exec, StackVal::V(Value::F(-a)));
            }
            Instr::CastIF => {
                let a = Self::pop_v(exec)?.as_i();
                Self::push(exec, StackVal::V(Value::F(a as f64)));
            }
            Instr::CmpI(op) => {
                let b = Self::pop_v(exec)?.as_i();
                let a = Self::pop_v(exec)?.as_i();
                let r = match op {
                    CmpOp::Eq => a == b,
                    CmpOp::Ne => a != b,
                    CmpOp::Lt => a < b,
                    CmpOp::Le => a <= b,
                    CmpOp::Gt => a > b,
                    CmpOp::Ge => a >= b,
                };
                Self::push(exec, StackVal::V(Value::I(i64::from(r))));
            }
            Instr::CmpF(op) => {
                let b = Self::pop_v(exec)?.as_f();
                let a = Self::pop_v(exec)?.as_f();
                let r = match op {
                    CmpOp::Eq => a == b,
                    CmpOp::Ne => a != b,
                    CmpOp::Lt => a < b,
                    CmpOp::Le => a <= b,
                    CmpOp::Gt => a > b,
                    CmpOp::Ge => a >= b,
                };
                Self::push(exec, StackVal::V(Value::I(i64::from(r))));
            }
            Instr::AndL => {
                let b = Self::pop_v(exec)?.as_i();
                let a = Self::pop_v(exec)?.as_i();
                Self::push(exec, StackVal::V(Value::I(i64::from(a != 0 && b != 0))));
            }
            Instr::OrL => {
                let b = Self::pop_v(exec)?.as_i();
                let a = Self::pop_v(exec)?.as_i();
                Self::push(exec, StackVal::V(Value::I(i64::from(a != 0 || b != 0))));
            }
            Instr::NotL => {
                let a = Self::pop_v(exec)?.as_i();
                Self::push(exec, StackVal::V(Value::I(i64::from(a == 0))));
            }
            Instr::Jmp(t) => exec.frames.last_mut().unwrap().ip = t as usize,
            Instr::JmpIfZ(t) => {
                let a = Self::pop_v(exec)?.as_i();
                if a == 0 {
                    exec.frames.last_mut().unwrap().ip = t as usize;
                }
            }
            Instr::JmpIfNZ(t) => {
                let a = Self::pop_v(exec)?.as_i();
                if a != 0 {
                    exec.frames.last_mut().unwrap().ip = t as usize;
                }
            }
            Instr::PushRef(vr) => {
                let p = self.scalar_place(exec, &vr)?;
                Self::push(exec, StackVal::P(p));
            }
            Instr::PushRefElem { arr, rank } => {
                let (addr, kind) = self.elem_place(core, exec, &arr, rank)?;
                Self::push(exec, StackVal::P(Place::Mem { addr, kind }));
            }
            Instr::PushRefFld { rec, field } => {
                let r = self.resolve_rec(core, exec, &rec)?;
                let (addr, kind) = self.fld_place(r, field);
                Self::push(exec, StackVal::P(Place::Mem { addr, kind }));
            }
            Instr::PushRefFldElem { rec, field, rank } => {
                let (addr, kind) = self.fld_elem_place(core, exec, &rec, field, rank)?;
                Self::push(exec, StackVal::P(Place::Mem { addr, kind }));
            }
            Instr::PushTemp => {
                let v = Self::pop_v(exec)?;
                let fidx = (exec.frames.len() - 1) as u32;
                let frame = exec.frames.last_mut().unwrap();
                frame.temps.push(v);
                let idx = (frame.temps.len() - 1) as u16;
                let c = self.slot_cost(core);
                self.charge(core, c);
                Self::push(exec, StackVal::P(Place::Temp { frame: fidx, idx }));
            }
            Instr::PushDesc(vr) => {
                let d = self.resolve_desc(core, exec, &vr)?;
                Self::push(exec, StackVal::D(d));
            }
            Instr::PushRec(vr) => {
                let r = self.resolve_rec(core, exec, &vr)?;
                Self::push(exec, StackVal::R(r));
            }
            Instr::Call { f, argc } => {
                let FuncRef::Id(id) = f else { return Err(FaultKind::MissingDeviceCode) };
                self.do_call(core, exec, side, id, argc, None)?;
            }
            Instr::CallNested { f, hops, argc } => {
                let FuncRef::Id(id) = f else { return Err(FaultKind::MissingDeviceCode) };
                let link = self.chain_frame(exec, hops);
                self.do_call(core, exec, side, id, argc, Some(link))?;
            }
            Instr::CallVirt { method, argc } => {
                // receiver is the first argument
                let frame = exec.frames.last().unwrap();
                let recv_pos = frame.eval.len() - argc as usize;
                let StackVal::R(recv) = frame.eval[recv_pos].clone() else {
                    return Err(FaultKind::IllegalInstruction("virtual call without receiver".into()));
                };
                let tag = self.scalar_read(core, recv.addr)?;
                if tag == 0 || tag as usize > self.image.records.len() {
                    return Err(FaultKind::WildAddress(format!("record tag {tag}")));
                }
                let dynamic = (tag - 1) as u32;
                let Some(target) = self.image.find_method(dynamic, method) else {
                    return Err(FaultKind::IllegalInstruction(format!(
                        "no method {method} on record {dynamic}"
                    )));
                };
                self.do_call(core, exec, side, target, argc, None)?;
            }
            Instr::Ret => {
                self.pop_frame(core, exec);
                if exec.frames.is_empty() {
                    return Ok(ExecOut::Done);
                }
            }
            Instr::Trap(TrapKind::ZeroStep) => return Err(FaultKind::ZeroStep),
            // ---- host-only --------------------------------------------------
            Instr::CapAlloc { size, dst } => {
                let addr = self.alloc_capture(size as u64)?;
                let fidx = (exec.frames.len() - 1) as u32;
                self.write_slot_value(core, exec, fidx, dst, Value::I(addr as i64))?;
            }
            Instr::CapScalar { cap, off } | Instr::CapHandle { cap, off } => {
                let v = Self::pop_v(exec)?;
                let fidx = (exec.frames.len() - 1) as u32;
                let base = self.read_slot_value(core, exec, fidx, cap)?.as_i() as u64;
                self.scalar_write(core, Addr::main(base + off as u64), v.bits())?;
            }
            Instr::CapDesc { cap, off, arr } => {
                let d = self.resolve_desc(core, exec, &arr)?;
                let Space::Main = d.base.space else {
                    return Err(FaultKind::IllegalInstruction(
                        "captured arrays must live in main memory".into(),
                    ));
                };
                let fidx = (exec.frames.len() - 1) as u32;
                let base = self.read_slot_value(core, exec, fidx, cap)?.as_i() as u64;
                let at = (base + off as u64) as usize;
                let mut bytes = Vec::with_capacity(DESC_BYTES as usize);
                bytes.extend_from_slice(&d.base.off.to_le_bytes());
                bytes.extend_from_slice(&(d.rank as u64).to_le_bytes());
                for k in 0..3 {
                    bytes.extend_from_slice(&d.lb[k].to_le_bytes());
                }
                for k in 0..3 {
                    bytes.extend_from_slice(&d.ext[k].to_le_bytes());
                }
                // one burst write
                let c = self.cost().main_memory_access;
                self.charge(core, c);
                self.main[at..at + DESC_BYTES as usize].copy_from_slice(&bytes);
            }
            Instr::CapRec { cap, off, rec } => {
                let r = self.resolve_rec(core, exec, &rec)?;
                let Space::Main = r.addr.space else {
                    return Err(FaultKind::IllegalInstruction(
                        "captured records must live in main memory".into(),
                    ));
                };
                let fidx = (exec.frames.len() - 1) as u32;
                let base = self.read_slot_value(core, exec, fidx, cap)?.as_i() as u64;
                self.scalar_write(core, Addr::main(base + off as u64), r.addr.off)?;
            }
            Instr::Dispatch { entry, device, cap } => {
                let fidx = (exec.frames.len() - 1) as u32;
                let args = self.read_slot_value(core, exec, fidx, cap)?.as_i() as u64;
                let FuncRef::Id(id) = entry else { return Err(FaultKind::MissingDeviceCode) };
                if self.image.entry_by_fn(id).is_none() {
                    return Err(FaultKind::UnknownEntry(id as u64 + 1));
                }
                if !self.server_running {
                    return Err(FaultKind::ServerNotRunning);
                }
                self.mpe_proto =
                    Some(Proto::DispWriteArgs { wire: id as u64 + 1, args, device });
            }
            Instr::Spawn => {
                let frame = exec.frames.last_mut().unwrap();
                let Some(StackVal::R(rec)) = frame.eval.pop() else {
                    return Err(FaultKind::IllegalInstruction("spawn without record".into()));
                };
                let wire = Self::pop_v(exec)?;
                let Value::H(wire) = wire else {
                    return Err(FaultKind::BadHandle("spawn target is not a handle".into()));
                };
                self.start_spawn(wire, rec)?;
            }
            Instr::Join => {
                if !self.spawn_active {
                    return Err(FaultKind::JoinWithoutSpawn);
                }
                self.mpe_proto = Some(Proto::JoinPoll);
            }
            Instr::ReadI64 => {
                let p = Self::pop_place(exec)?;
                let Some(v) = self.stdin.pop_front() else {
                    return Err(FaultKind::StdinExhausted);
                };
                self.place_write(core, exec, p, Value::I(v))?;
            }
            Instr::PrintI64 => {
                let v = Self::pop_v(exec)?.as_i();
                self.output.push_str(&format!("{v}\n"));
            }
            Instr::PrintF64 => {
                let v = Self::pop_v(exec)?.as_f();
                self.output.push_str(&format!("{v}\n"));
            }
            // ---- device-side -------------------------------------------------
            Instr::Barrier => {
                if self.is_mpe(core) {
                    // single flow of control: a barrier is immediately satisfied
                } else {
                    self.cache_flush(core);
                    return Ok(ExecOut::BarrierArrive);
                }
            }
            Instr::CritEnter => {
                if !self.is_mpe(core) {
                    return self.critical_enter(core, exec);
                }
            }
            Instr::CritExit => {
                if !self.is_mpe(core) {
                    self.critical_exit(core)?;
                }
            }
            Instr::CoreId => {
                let id = if self.is_mpe(core) { 0 } else { core as i64 };
                Self::push(exec, StackVal::V(Value::I(id)));
            }
            Instr::VnestId => {
                let (gcnt, tcnt) = if self.is_mpe(core) { (1, 1) } else { self.vnest };
                let id = if self.is_mpe(core) { 0 } else { core as i64 };
                let vals = [id / tcnt, id % tcnt, gcnt, tcnt, tcnt];
                let mut places = Vec::with_capacity(5);
                for _ in 0..5 {
                    places.push(Self::pop_place(exec)?);
                }
                places.reverse();
                for (p, v) in places.into_iter().zip(vals) {
                    self.place_write(core, exec, p, Value::I(v))?;
                }
            }
            Instr::CapGet { off, kind } => {
                let frame = exec.frames.last().unwrap();
                let src = frame
                    .capture_src
                    .ok_or_else(|| FaultKind::IllegalInstruction("CapGet outside entry".into()))?;
                let at = src.add(off as u64);
                match kind {
                    CapGetKind::I64 => {
                        let bits = self.scalar_read(core, at)?;
                        Self::push(exec, StackVal::V(Value::I(bits as i64)));
                    }
                    CapGetKind::F64 => {
                        let bits = self.scalar_read(core, at)?;
                        Self::push(exec, StackVal::V(Value::F(f64::from_bits(bits))));
                    }
                    CapGetKind::Handle => {
                        let bits = self.scalar_read(core, at)?;
                        Self::push(exec, StackVal::V(Value::H(bits)));
                    }
                    CapGetKind::Desc => {
                        let mut w = [0u64; 8];
                        for (k, slot) in w.iter_mut().enumerate() {
                            *slot = self.scalar_read(core, at.add(k as u64 * 8))?;
                        }
                        let d = ArrDesc {
                            base: Addr::main(w[0]),
                            elem: ScalarTy::Int64, // refined below
                            rank: w[1] as u8,
                            lb: [w[2] as i64, w[3] as i64, w[4] as i64],
                            ext: [w[5] as i64, w[6] as i64, w[7] as i64],
                        };
                        // element kind comes from the entry's parameter list,
                        // which the St following this CapGet targets; the
                        // descriptor wire format is elem-agnostic, so look at
                        // the function metadata
                        let d = self.refine_desc_elem(exec, d);
                        Self::push(exec, StackVal::D(d));
                    }
                    CapGetKind::Rec { record } => {
                        let bits = self.scalar_read(core, at)?;
                        Self::push(exec, StackVal::R(RecHandle { addr: Addr::main(bits), record }));
                    }
                }
            }
        }
        Ok(if exec.frames.is_empty() { ExecOut::Done } else { ExecOut::Cont })
    }

    /// The wire descriptor does not carry the element type; take it from the
    /// parameter the following store targets.
    fn refine_desc_elem(&self, exec: &Exec, mut d: ArrDesc) -> ArrDesc {
        let frame = exec.frames.last().unwrap();
        let f = self.func(frame.side, frame.func);
        // the instruction after a CapGet Desc is St(Slot(i))
        if let Some(Instr::St(VarRef::Slot(i))) = f.code.get(frame.ip) {
            if let Some(ParamMeta::Arr { elem, .. }) = f.params.get(*i as usize) {
                d.elem = *elem;
            }
        }
        d
    }

    fn do_call(
        &mut self,
        core: usize,
        exec: &mut Exec,
        side: Side,
        id: FuncId,
        argc: u8,
        static_link: Option<u32>,
    ) -> Result<(), FaultKind> {
        let frame = exec.frames.last_mut().unwrap();
        let at = frame.eval.len() - argc as usize;
        let args: Vec<StackVal> = frame.eval.drain(at..).collect();
        let mut new = self.build_frame(core, side, id, args)?;
        new.static_link = static_link;
        exec.frames.push(new);
        Ok(())
    }
}

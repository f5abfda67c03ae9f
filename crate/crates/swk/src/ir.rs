//! Linked program image: a compact instruction-list IR for both function
//! tables, the entry table with capture layouts, global and record layouts,
//! and accumulated warnings. Serialized as versioned JSON so images are
//! inspectable and byte-identical across rebuilds.

use serde::{Deserialize, Serialize};

use crate::frontend::ast::ScalarTy;

pub const IMAGE_FORMAT: &str = "swk-image";
pub const IMAGE_VERSION: u32 = 1;

pub type FuncId = u32;

/// Reference to a variable visible from the current frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarRef {
    /// Parameter or local slot of the current frame.
    Slot(u16),
    /// Slot of a lexically enclosing frame, reached via the static chain.
    Chain { hops: u8, slot: u16 },
    /// Global by table index (resolved at link).
    Glob(u32),
    /// Global by name (only before linking).
    GlobSym(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum FuncRef {
    Id(FuncId),
    /// Unresolved symbol; survives linking only in host-only images, where
    /// executing it raises a missing-device-code fault.
    Sym(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrapKind {
    ZeroStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Instr {
    PushI(i64),
    PushF(f64),
    /// Push a routine handle (wire encoding: device function id + 1).
    PushHandle(FuncRef),
    /// Scalar load/store; dispatches on the slot kind (value vs by-ref).
    Ld(VarRef),
    St(VarRef),
    LdElem { arr: VarRef, rank: u8 },
    StElem { arr: VarRef, rank: u8 },
    LdFld { rec: VarRef, field: u16 },
    StFld { rec: VarRef, field: u16 },
    LdFldElem { rec: VarRef, field: u16, rank: u8 },
    StFldElem { rec: VarRef, field: u16, rank: u8 },
    AddI,
    SubI,
    MulI,
    DivI,
    ModI,
    NegI,
    AddF,
    SubF,
    MulF,
    DivF,
    NegF,
    /// int64 -> float64 conversion of the stack top.
    CastIF,
    CmpI(CmpOp),
    CmpF(CmpOp),
    AndL,
    OrL,
    NotL,
    Jmp(u32),
    JmpIfZ(u32),
    JmpIfNZ(u32),
    /// Push a by-reference place for an argument.
    PushRef(VarRef),
    PushRefElem { arr: VarRef, rank: u8 },
    PushRefFld { rec: VarRef, field: u16 },
    PushRefFldElem { rec: VarRef, field: u16, rank: u8 },
    /// Pop a value into a fresh temporary cell and push its place.
    PushTemp,
    /// Push a whole-array descriptor argument.
    PushDesc(VarRef),
    /// Push a whole-record argument.
    PushRec(VarRef),
    Call { f: FuncRef, argc: u8 },
    /// Call a nested routine; its static link is the current frame walked
    /// up `hops` levels.
    CallNested { f: FuncRef, hops: u8, argc: u8 },
    /// Dynamically bound method call; the receiver is the first argument.
    CallVirt { method: u32, argc: u8 },
    Ret,
    Trap(TrapKind),
    // ---- host only -----------------------------------------------------
    /// Allocate a capture record of `size` bytes; its address goes to slot `dst`.
    CapAlloc { size: u32, dst: u16 },
    /// Pop a scalar value and store it into the capture record.
    CapScalar { cap: u16, off: u32 },
    CapHandle { cap: u16, off: u32 },
    /// Write an array descriptor into the capture record.
    CapDesc { cap: u16, off: u32, arr: VarRef },
    /// Write a record address into the capture record.
    CapRec { cap: u16, off: u32, rec: VarRef },
    /// Blocking offload of `entry` to all compute cores.
    Dispatch { entry: FuncRef, device: u8, cap: u16 },
    /// Pop (record, handle); shut down the job server if running, then run
    /// the handle's function on all compute cores.
    Spawn,
    Join,
    /// Pop a place; read one int64 from program input into it.
    ReadI64,
    PrintI64,
    PrintF64,
    // ---- device side ----------------------------------------------------
    Barrier,
    CritEnter,
    CritExit,
    /// Push the executing core's id (0 on the host core).
    CoreId,
    /// Pop five places and write (gid, tid, gcnt, tcnt, tsize).
    VnestId,
    /// Entry prologue: push one capture-record field.
    CapGet { off: u32, kind: CapGetKind },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum CapGetKind {
    I64,
    F64,
    Handle,
    Desc,
    Rec { record: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamMeta {
    Scalar(ScalarTy),
    Handle,
    Arr { elem: ScalarTy, rank: u8 },
    Rec { record: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LocalMeta {
    Scalar(ScalarTy),
    Handle,
    Arr { elem: ScalarTy, rank: u8, lb: [i64; 3], ext: [i64; 3], byte_off: u64 },
    Rec { record: u32, byte_off: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FnKind {
    Plain,
    /// Outlined target-region entry (device table only).
    Entry,
    /// Routine nested in `parent` (host table only; device copies are inlined).
    Nested,
    Method,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrFunction {
    pub name: String,
    pub kind: FnKind,
    pub params: Vec<ParamMeta>,
    pub locals: Vec<LocalMeta>,
    /// Bytes reserved on the stack per activation (slots, temp slack and
    /// aggregate storage).
    pub frame_bytes: u64,
    /// Lexical nesting depth (0 for top-level).
    pub depth: u8,
    pub code: Vec<Instr>,
    /// Source unit this function came from.
    pub unit: String,
}

impl IrFunction {
    pub fn n_slots(&self) -> u16 {
        (self.params.len() + self.locals.len()) as u16
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TyMeta {
    I64,
    F64,
    Handle,
    Arr { elem: ScalarTy, rank: u8, lb: [i64; 3], ext: [i64; 3] },
    Rec { record: u32 },
}

impl TyMeta {
    pub fn byte_size(&self, records: &[RecordMeta]) -> u64 {
        match self {
            TyMeta::I64 | TyMeta::F64 | TyMeta::Handle => 8,
            TyMeta::Arr { rank, ext, .. } => {
                let mut n = 1u64;
                for k in 0..*rank as usize {
                    n *= ext[k].max(0) as u64;
                }
                n * 8
            }
            TyMeta::Rec { record } => records[*record as usize].size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalMeta {
    pub name: String,
    pub ty: TyMeta,
    pub offset: u64,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldMeta {
    pub name: String,
    pub ty: TyMeta,
    /// Offset within the record, including the 8-byte tag word.
    pub off: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub name: String,
    pub parent: Option<u32>,
    pub fields: Vec<FieldMeta>,
    /// Total byte size including the tag word.
    pub size: u64,
    /// (method name id, host function id), sorted by name id; resolved over
    /// the full hierarchy.
    pub vtable: Vec<(u32, FuncId)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaptureModeMeta {
    ByValue,
    ByAddress,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapField {
    pub name: String,
    pub ty: TyMeta,
    pub mode: CaptureModeMeta,
    pub off: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureLayout {
    pub fields: Vec<CapField>,
    pub size: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryMeta {
    pub name: String,
    /// Device function implementing the entry body. Entry ids on the wire
    /// are this id + 1 (0 is the idle sentinel).
    pub device_fn: FuncId,
    pub device: u8,
    pub capture: CaptureLayout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgramImage {
    pub format: String,
    pub version: u32,
    pub host_functions: Vec<IrFunction>,
    pub device_functions: Vec<IrFunction>,
    pub host_main: FuncId,
    pub entries: Vec<EntryMeta>,
    pub globals: Vec<GlobalMeta>,
    pub globals_size: u64,
    pub records: Vec<RecordMeta>,
    pub method_names: Vec<String>,
    pub warnings: Vec<String>,
}

impl ProgramImage {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec_pretty(self).expect("image serializes");
        v.push(b'\n');
        v
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ProgramImage, String> {
        let img: ProgramImage =
            serde_json::from_slice(bytes).map_err(|e| format!("malformed image: {e}"))?;
        if img.format != IMAGE_FORMAT {
            return Err(format!("not a program image (format '{}')", img.format));
        }
        if img.version != IMAGE_VERSION {
            return Err(format!(
                "unsupported image version {} (expected {})",
                img.version, IMAGE_VERSION
            ));
        }
        Ok(img)
    }

    pub fn entry_by_fn(&self, device_fn: FuncId) -> Option<&EntryMeta> {
        self.entries.iter().find(|e| e.device_fn == device_fn)
    }

    pub fn find_method(&self, record: u32, method: u32) -> Option<FuncId> {
        let rec = &self.records[record as usize];
        rec.vtable.iter().find(|(m, _)| *m == method).map(|(_, f)| *f)
    }
}

/// Fixed wire layout of an array descriptor stored in memory (capture
/// records): base address, rank, three lower bounds, three extents.
pub const DESC_BYTES: u32 = 64;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_roundtrip_and_version_check() {
        let img = ProgramImage {
            format: IMAGE_FORMAT.into(),
            version: IMAGE_VERSION,
            host_functions: vec![IrFunction {
                name: "main".into(),
                kind: FnKind::Plain,
                params: vec![],
                locals: vec![LocalMeta::Scalar(ScalarTy::Int64)],
                frame_bytes: 104,
                depth: 0,
                code: vec![Instr::PushI(1), Instr::St(VarRef::Slot(0)), Instr::Ret],
                unit: "t.swk".into(),
            }],
            device_functions: vec![],
            host_main: 0,
            entries: vec![],
            globals: vec![],
            globals_size: 0,
            records: vec![],
            method_names: vec![],
            warnings: vec![],
        };
        let bytes = img.to_bytes();
        let back = ProgramImage::from_bytes(&bytes).unwrap();
        assert_eq!(img, back);
        assert_eq!(bytes, back.to_bytes());

        let mut bad = img.clone();
        bad.version = 99;
        assert!(ProgramImage::from_bytes(&bad.to_bytes()).is_err());
    }
}

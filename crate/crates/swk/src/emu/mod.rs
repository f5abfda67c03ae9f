//! Deterministic emulator of one heterogeneous core group: a management
//! core (MPE) plus up to 64 compute elements (CPEs), shared main memory,
//! per-CPE scratchpads with an optional cache partition, DMA/RMA transfer
//! engines and a cycle cost model.
//!
//! Scheduling picks the runnable core with the lowest cycle count; ties are
//! broken by a seeded permutation, so identical (image, input, config, seed)
//! always produce identical traces and final memory.

pub mod exec;
pub mod memory;
pub mod trace;

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::ir::{FuncId, ProgramImage, TyMeta};
use exec::Exec;
use memory::{Addr, Cache, Space};
use trace::{EmuEvent, EventKind, SyncBarrier, SyncPhase, Trace, MPE_CORE};

/// Wire value marking "no task" in mailbox word 0.
pub const IDLE_WIRE: u64 = 0;
/// Wire value commanding the job server to shut down.
pub const SHUTDOWN_WIRE: u64 = u64::MAX;
/// Mailbox byte offsets in each CPE's LDM.
pub const MBOX_ENTRY: u64 = 0;
pub const MBOX_ARGS: u64 = 8;
pub const MBOX_DEVICE: u64 = 16;
pub const MBOX_GEN: u64 = 24;
pub const MBOX_BYTES: u64 = 256;
/// Capture staging area at the bottom of user LDM.
pub const CAPTURE_STAGING_BYTES: u64 = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    pub instruction: u64,
    pub ldm_access: u64,
    pub cache_hit: u64,
    pub main_memory_access: u64,
    pub dma_setup: u64,
    pub dma_per_8_bytes: u64,
    pub rma_setup: u64,
    pub rma_per_8_bytes: u64,
    pub sync_instruction: u64,
    pub atomic_op: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            instruction: 1,
            ldm_access: 1,
            cache_hit: 4,
            main_memory_access: 100,
            dma_setup: 50,
            dma_per_8_bytes: 2,
            rma_setup: 10,
            rma_per_8_bytes: 1,
            sync_instruction: 20,
            atomic_op: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChipConfig {
    pub cpe_count: usize,
    pub ldm_bytes: u64,
    /// 0 means uncached direct main-memory access.
    pub ldm_cache_bytes: u64,
    pub main_memory_bytes: u64,
    pub cost: CostModel,
    pub interleave_seed: Option<u64>,
    /// Device-0 stack reserve inside the LDM.
    pub ldm_stack_bytes: u64,
    pub mpe_stack_bytes: u64,
    /// Device-1 private stack per CPE, in main memory.
    pub device1_stack_bytes: u64,
    pub capture_arena_bytes: u64,
    /// get_vnestid grouping; defaults to 8x8 for 64 CPEs, else (1, cpe_count).
    pub vnest_gcnt: Option<i64>,
    pub vnest_tcnt: Option<i64>,
    pub max_cycles: u64,
}

impl Default for ChipConfig {
    fn default() -> Self {
        ChipConfig {
            cpe_count: 64,
            ldm_bytes: 256 * 1024,
            ldm_cache_bytes: 0,
            main_memory_bytes: 160 * 1024 * 1024,
            cost: CostModel::default(),
            interleave_seed: None,
            ldm_stack_bytes: 64 * 1024,
            mpe_stack_bytes: 8 * 1024 * 1024,
            device1_stack_bytes: 1024 * 1024,
            capture_arena_bytes: 1024 * 1024,
            vnest_gcnt: None,
            vnest_tcnt: None,
            max_cycles: 20_000_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BootError {
    #[error("cpe_count {0} out of range 1..=64")]
    BadCpeCount(usize),
    #[error("ldm layout does not fit: {0}")]
    LdmLayout(String),
    #[error("image too large: {0}")]
    ImageTooLarge(String),
    #[error("bad vnest grouping: {0}")]
    BadVnest(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fault {
    pub core: i32,
    pub cycle: u64,
    pub kind: FaultKind,
}

impl std::fmt::Display for Fault {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let who = if self.core == MPE_CORE { "mpe".to_string() } else { format!("cpe{}", self.core) };
        write!(f, "emulation fault on {who} at cycle {}: {}", self.cycle, self.kind)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FaultKind {
    #[error("wild address: {0}")]
    WildAddress(String),
    #[error("subscript out of bounds: {0}")]
    OutOfBounds(String),
    #[error("out-of-bounds transfer: {0}")]
    OutOfBoundsTransfer(String),
    #[error("integer division by zero")]
    DivideByZero,
    #[error("do loop step is zero")]
    ZeroStep,
    #[error("stack overflow on device {device}: {used} bytes used of {limit}")]
    StackOverflow { device: u8, used: u64, limit: u64 },
    #[error("deadlock: no runnable core can make progress")]
    Deadlock,
    #[error("unknown entry id {0}")]
    UnknownEntry(u64),
    #[error("job server not running")]
    ServerNotRunning,
    #[error("job server already running")]
    AlreadyRunning,
    #[error("image has no device code for this dispatch")]
    MissingDeviceCode,
    #[error("join without a matching spawn")]
    JoinWithoutSpawn,
    #[error("spawn while a spawned task is active")]
    SpawnWhileActive,
    #[error("bad handle: {0}")]
    BadHandle(String),
    #[error("critical section discipline: {0}")]
    CriticalDiscipline(String),
    #[error("read_int64 past end of input")]
    StdinExhausted,
    #[error("cycle limit exceeded")]
    CycleLimit,
    #[error("LDM isolation violation: {0}")]
    Isolation(String),
    #[error("illegal instruction: {0}")]
    IllegalInstruction(String),
}

/// Memory map computed at boot.
#[derive(Debug, Clone)]
pub struct MemLayout {
    pub guard_end: u64,
    pub lock_addr: u64,
    pub globals_base: u64,
    pub capture_base: u64,
    pub capture_end: u64,
    pub mpe_stack_base: u64,
    pub dev1_base: u64,
    /// Start of the device-0 stack inside the LDM.
    pub ldm_stack_base: u64,
    /// Start of the capture staging area inside the LDM.
    pub ldm_staging_base: u64,
    /// First LDM byte owned by the cache partition (end of accessible LDM).
    pub ldm_user_end: u64,
}

#[derive(Debug, Clone)]
pub(crate) enum GlobalCell {
    Scalar { addr: u64, float: bool },
    Handle { addr: u64 },
    Arr(exec::ArrDesc),
    Rec(exec::RecHandle),
}

// ---- core state -----------------------------------------------------------

#[derive(Debug)]
pub(crate) enum CoreState {
    Idle,
    Halted,
    /// Placeholder while a slice is in flight.
    Transition,
    Serving(ServePhase),
    /// A task was delivered; the next slice builds the frame and starts it.
    StartTask { entry_wire: u64, args: u64, device: u8 },
    Running(Exec),
    /// Arrived at the end-of-task synchronization.
    TaskBarrier { entry_wire: u64 },
    /// Arrived at a directive barrier inside a task.
    UserBarrier { exec: Exec },
    /// CPE0 waiting for its issued RMA writes to land.
    RmaFence { then: AfterFence },
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum AfterFence {
    ShutdownComplete,
}

#[derive(Debug, Clone)]
pub(crate) enum ServePhase {
    Poll,
    /// CPE0 read a nonzero task word; read the rest of the descriptor.
    ReadDesc,
    Broadcast { next: usize, entry_wire: u64, args: u64, device: u8 },
    ShutdownBroadcast { next: usize },
}

/// Multi-cycle MPE-side protocol operations.
#[derive(Debug, Clone)]
pub(crate) enum Proto {
    DispWriteArgs { wire: u64, args: u64, device: u8 },
    DispWriteDevice { wire: u64, device: u8 },
    DispWriteEntry { wire: u64 },
    DispPoll,
    SpawnShutdownWrite { wire: u64, args: u64 },
    SpawnShutdownPoll { wire: u64, args: u64 },
    SpawnLaunch { wire: u64, args: u64, next: usize },
    JoinPoll,
}

pub(crate) struct Core {
    pub cycle: u64,
    pub state: CoreState,
    /// Stack bytes in use.
    pub sp: u64,
    /// Stack selection for the running task (0 = LDM, 1 = private main).
    pub device: u8,
    /// Critical-section backoff exponent.
    pub crit_attempts: u32,
}

struct Delivery {
    at: u64,
    seq: u64,
    src: usize,
    dst_core: usize,
    dst_off: u64,
    bytes: Vec<u8>,
}

impl PartialEq for Delivery {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl Eq for Delivery {}
impl PartialOrd for Delivery {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Delivery {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

#[derive(Debug, Default)]
pub(crate) struct BarrierState {
    pub arrived: Vec<usize>,
    pub max_cycle: u64,
    pub generation: u64,
}

pub struct Chip {
    pub cfg: ChipConfig,
    pub image: ProgramImage,
    pub layout: MemLayout,
    pub(crate) main: Vec<u8>,
    pub(crate) ldms: Vec<Vec<u8>>,
    pub(crate) caches: Vec<Cache>,
    pub(crate) cores: Vec<Core>,
    pub(crate) globals: Vec<GlobalCell>,
    pub trace: Trace,
    deliveries: BinaryHeap<Reverse<Delivery>>,
    delivery_seq: u64,
    pub(crate) rma_outstanding: Vec<u64>,
    pub(crate) server_running: bool,
    pub(crate) spawn_active: bool,
    pub(crate) task_barrier: BarrierState,
    pub(crate) user_barrier: BarrierState,
    pub(crate) lock_holder: Option<usize>,
    pub(crate) mpe_proto: Option<Proto>,
    pub(crate) cap_bump: u64,
    pub(crate) generation: u64,
    pub(crate) vnest: (i64, i64),
    pub stdin: VecDeque<i64>,
    pub output: String,
    slice_index: u64,
    seed: u64,
    pub(crate) fault: Option<Fault>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Progress,
    /// The host main routine has returned (and no protocol op is pending).
    MpeHalted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunOutcome {
    Halted,
}

impl Chip {
    pub fn mpe_index(&self) -> usize {
        self.cfg.cpe_count
    }

    pub fn core_label(&self, core: usize) -> i32 {
        if core == self.mpe_index() {
            MPE_CORE
        } else {
            core as i32
        }
    }

    pub fn boot(cfg: ChipConfig, image: &ProgramImage) -> Result<Chip, BootError> {
        if cfg.cpe_count == 0 || cfg.cpe_count > 64 {
            return Err(BootError::BadCpeCount(cfg.cpe_count));
        }
        let ldm_staging_base = MBOX_BYTES + cfg.ldm_stack_bytes;
        let ldm_user_end = cfg.ldm_bytes.saturating_sub(cfg.ldm_cache_bytes);
        if ldm_staging_base + CAPTURE_STAGING_BYTES > ldm_user_end {
            return Err(BootError::LdmLayout(format!(
                "mailbox ({MBOX_BYTES}) + stack ({}) + staging ({CAPTURE_STAGING_BYTES}) + cache ({}) exceed {} LDM bytes",
                cfg.ldm_stack_bytes, cfg.ldm_cache_bytes, cfg.ldm_bytes
            )));
        }
        if cfg.ldm_cache_bytes % memory::CACHE_LINE != 0 {
            return Err(BootError::LdmLayout(format!(
                "cache partition {} is not a multiple of the {}-byte line",
                cfg.ldm_cache_bytes,
                memory::CACHE_LINE
            )));
        }
        let align = |x: u64| x.div_ceil(4096) * 4096;
        let guard_end = 0x1000;
        let lock_addr = 0x1000;
        let globals_base = 0x2000;
        let capture_base = align(globals_base + image.globals_size);
        let capture_end = capture_base + cfg.capture_arena_bytes;
        let mpe_stack_base = align(capture_end);
        let dev1_base = align(mpe_stack_base + cfg.mpe_stack_bytes);
        let total = dev1_base + cfg.cpe_count as u64 * cfg.device1_stack_bytes;
        if total > cfg.main_memory_bytes {
            return Err(BootError::ImageTooLarge(format!(
                "memory map needs {total} bytes, config provides {}",
                cfg.main_memory_bytes
            )));
        }
        let vnest = match (cfg.vnest_gcnt, cfg.vnest_tcnt) {
            (Some(g), Some(t)) => (g, t),
            (None, None) if cfg.cpe_count == 64 => (8, 8),
            (None, None) => (1, cfg.cpe_count as i64),
            _ => return Err(BootError::BadVnest("set both vnest_gcnt and vnest_tcnt".into())),
        };
        if vnest.0 <= 0 || vnest.1 <= 0 || (vnest.0 * vnest.1) as usize != cfg.cpe_count {
            return Err(BootError::BadVnest(format!(
                "{} x {} groups do not cover {} CPEs",
                vnest.0, vnest.1, cfg.cpe_count
            )));
        }

        let layout = MemLayout {
            guard_end,
            lock_addr,
            globals_base,
            capture_base,
            capture_end,
            mpe_stack_base,
            dev1_base,
            ldm_stack_base: MBOX_BYTES,
            ldm_staging_base,
            ldm_user_end,
        };

        let mut main = vec![0u8; cfg.main_memory_bytes as usize];
        // globals: record tags initialized at boot
        let mut globals = Vec::new();
        for g in &image.globals {
            let addr = globals_base + g.offset;
            let cell = match &g.ty {
                TyMeta::I64 => GlobalCell::Scalar { addr, float: false },
                TyMeta::F64 => GlobalCell::Scalar { addr, float: true },
                TyMeta::Handle => GlobalCell::Handle { addr },
                TyMeta::Arr { elem, rank, lb, ext } => GlobalCell::Arr(exec::ArrDesc {
                    base: Addr::main(addr),
                    elem: *elem,
                    rank: *rank,
                    lb: *lb,
                    ext: *ext,
                }),
                TyMeta::Rec { record } => {
                    let tag = (*record as u64) + 1;
                    main[addr as usize..addr as usize + 8].copy_from_slice(&tag.to_le_bytes());
                    GlobalCell::Rec(exec::RecHandle { addr: Addr::main(addr), record: *record })
                }
            };
            globals.push(cell);
        }

        let mut cores: Vec<Core> = (0..cfg.cpe_count)
            .map(|_| Core { cycle: 0, state: CoreState::Idle, sp: 0, device: 0, crit_attempts: 0 })
            .collect();
        // MPE
        cores.push(Core { cycle: 0, state: CoreState::Idle, sp: 0, device: 0, crit_attempts: 0 });

        let seed = cfg.interleave_seed.unwrap_or(0);
        let mut chip = Chip {
            caches: (0..cfg.cpe_count).map(|_| Cache::new(cfg.ldm_cache_bytes)).collect(),
            ldms: (0..cfg.cpe_count).map(|_| vec![0u8; ldm_user_end as usize]).collect(),
            cores,
            layout,
            globals,
            trace: Trace::default(),
            deliveries: BinaryHeap::new(),
            delivery_seq: 0,
            rma_outstanding: vec![0; cfg.cpe_count + 1],
            server_running: false,
            spawn_active: false,
            task_barrier: BarrierState::default(),
            user_barrier: BarrierState::default(),
            lock_holder: None,
            mpe_proto: None,
            cap_bump: 0,
            generation: 0,
            vnest,
            stdin: VecDeque::new(),
            output: String::new(),
            slice_index: 0,
            seed,
            fault: None,
            main,
            image: image.clone(),
            cfg,
        };
        // host main loaded on the MPE
        let mpe = chip.mpe_index();
        let main_fn = chip.image.host_main;
        let exec = exec::Exec::new();
        chip.cores[mpe].state = CoreState::Running(exec);
        let frame = chip
            .build_frame(mpe, exec::Side::Host, main_fn, Vec::new())
            .map_err(|k| BootError::ImageTooLarge(format!("main frame: {k}")))?;
        if let CoreState::Running(exec) = &mut chip.cores[mpe].state {
            exec.frames.push(frame);
        }
        Ok(chip)
    }

    pub fn enable_trace(&mut self) {
        self.trace.enabled = true;
    }

    pub(crate) fn emit(&mut self, core: usize, kind: EventKind) {
        if self.trace.enabled {
            let cycle = self.cores[core].cycle;
            let core = self.core_label(core);
            self.trace.events.push(EmuEvent { cycle, core, kind });
        }
    }

    pub(crate) fn cost(&self) -> &CostModel {
        &self.cfg.cost
    }

    pub(crate) fn charge(&mut self, core: usize, cycles: u64) {
        self.cores[core].cycle += cycles;
    }

    pub fn mpe_cycles(&self) -> u64 {
        self.cores[self.mpe_index()].cycle
    }

    pub fn cpe_max_cycles(&self) -> u64 {
        self.cores[..self.cfg.cpe_count].iter().map(|c| c.cycle).max().unwrap_or(0)
    }

    // ---- raw memory helpers (test setup and snapshots) -------------------

    pub fn read_main(&self, off: u64, len: usize) -> &[u8] {
        &self.main[off as usize..off as usize + len]
    }

    pub fn write_main(&mut self, off: u64, bytes: &[u8]) {
        self.main[off as usize..off as usize + bytes.len()].copy_from_slice(bytes);
    }

    pub fn mailbox_word(&self, cpe: usize, word_off: u64) -> u64 {
        let b = &self.ldms[cpe][word_off as usize..word_off as usize + 8];
        u64::from_le_bytes(b.try_into().unwrap())
    }

    /// Canonical snapshot of the globals segment: one byte vector per global
    /// (routine handles excluded), comparable against the reference
    /// interpreter's snapshot.
    pub fn canonical_globals(&self) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        for g in &self.image.globals {
            if matches!(g.ty, TyMeta::Handle) {
                continue;
            }
            let base = (self.layout.globals_base + g.offset) as usize;
            out.push((g.name.clone(), self.main[base..base + g.size as usize].to_vec()));
        }
        out
    }

    /// Bump-allocate capture-record space (also used to stage arguments in
    /// tests and by the spawn path).
    pub fn alloc_capture(&mut self, bytes: u64) -> Result<u64, FaultKind> {
        let aligned = bytes.div_ceil(8) * 8;
        let addr = self.layout.capture_base + self.cap_bump;
        if addr + aligned > self.layout.capture_end {
            return Err(FaultKind::WildAddress("capture arena exhausted".into()));
        }
        self.cap_bump += aligned;
        Ok(addr)
    }

    // ---- cost-charged memory paths ----------------------------------------

    pub(crate) fn is_mpe(&self, core: usize) -> bool {
        core == self.mpe_index()
    }

    /// 8-byte scalar read with cost accounting and access checks.
    pub(crate) fn scalar_read(&mut self, core: usize, addr: Addr) -> Result<u64, FaultKind> {
        let mut buf = [0u8; 8];
        self.mem_access(core, addr, &mut buf, false)?;
        Ok(u64::from_le_bytes(buf))
    }

    pub(crate) fn scalar_write(&mut self, core: usize, addr: Addr, bits: u64) -> Result<(), FaultKind> {
        let mut buf = bits.to_le_bytes();
        self.mem_access(core, addr, &mut buf, true)
    }

    fn mem_access(
        &mut self,
        core: usize,
        addr: Addr,
        buf: &mut [u8],
        write: bool,
    ) -> Result<(), FaultKind> {
        match addr.space {
            Space::Main => {
                let end = addr.off + buf.len() as u64;
                if addr.off < self.layout.guard_end || end > self.cfg.main_memory_bytes {
                    return Err(FaultKind::WildAddress(format!(
                        "main address {:#x}..{:#x}",
                        addr.off, end
                    )));
                }
                if self.is_mpe(core) || !self.caches[core].enabled() {
                    let cost = self.cost().main_memory_access;
                    self.charge(core, cost);
                    let o = addr.off as usize;
                    if write {
                        self.main[o..o + buf.len()].copy_from_slice(buf);
                    } else {
                        buf.copy_from_slice(&self.main[o..o + buf.len()]);
                    }
                } else {
                    let hit = self.caches[core].access(&mut self.main, addr.off, buf, write);
                    let cost = match hit {
                        memory::Hit::Hit => self.cost().cache_hit,
                        _ => self.cost().main_memory_access,
                    };
                    self.charge(core, cost);
                }
                Ok(())
            }
            Space::Ldm(owner) => {
                let owner = owner as usize;
                if owner != core {
                    return Err(FaultKind::Isolation(format!(
                        "core {} accessed LDM of cpe{owner} directly",
                        self.core_label(core)
                    )));
                }
                let end = addr.off + buf.len() as u64;
                if end > self.layout.ldm_user_end {
                    return Err(FaultKind::WildAddress(format!(
                        "LDM address {:#x}..{:#x}",
                        addr.off, end
                    )));
                }
                let cost = self.cost().ldm_access;
                self.charge(core, cost);
                let o = addr.off as usize;
                if write {
                    self.ldms[owner][o..o + buf.len()].copy_from_slice(buf);
                } else {
                    buf.copy_from_slice(&self.ldms[owner][o..o + buf.len()]);
                }
                Ok(())
            }
        }
    }

    /// Zero a byte range without cost (frame initialization).
    pub(crate) fn zero_range(&mut self, addr: Addr, len: u64) -> Result<(), FaultKind> {
        match addr.space {
            Space::Main => {
                let end = addr.off + len;
                if addr.off < self.layout.guard_end || end > self.cfg.main_memory_bytes {
                    return Err(FaultKind::WildAddress(format!("zeroing {:#x}..{end:#x}", addr.off)));
                }
                self.main[addr.off as usize..end as usize].fill(0);
                Ok(())
            }
            Space::Ldm(owner) => {
                let end = addr.off + len;
                if end > self.layout.ldm_user_end {
                    return Err(FaultKind::WildAddress(format!("zeroing LDM {:#x}..{end:#x}", addr.off)));
                }
                self.ldms[owner as usize][addr.off as usize..end as usize].fill(0);
                Ok(())
            }
        }
    }

    // ---- mailbox paths (runtime-internal; bypass isolation checks) --------

    pub(crate) fn mbox_write(&mut self, cpe: usize, off: u64, value: u64) {
        self.ldms[cpe][off as usize..off as usize + 8].copy_from_slice(&value.to_le_bytes());
    }

    pub(crate) fn mbox_read(&self, cpe: usize, off: u64) -> u64 {
        u64::from_le_bytes(self.ldms[cpe][off as usize..off as usize + 8].try_into().unwrap())
    }

    // ---- transfer engines ---------------------------------------------------

    /// Blocking DMA between main memory and the core's own LDM.
    pub fn dma_get(&mut self, cpe: usize, main_off: u64, ldm_off: u64, bytes: u64) -> Result<(), Fault> {
        self.dma(cpe, main_off, ldm_off, bytes, false).map_err(|k| self.fault_on(cpe, k))
    }

    pub fn dma_put(&mut self, cpe: usize, main_off: u64, ldm_off: u64, bytes: u64) -> Result<(), Fault> {
        self.dma(cpe, main_off, ldm_off, bytes, true).map_err(|k| self.fault_on(cpe, k))
    }

    pub(crate) fn dma(
        &mut self,
        cpe: usize,
        main_off: u64,
        ldm_off: u64,
        bytes: u64,
        put: bool,
    ) -> Result<(), FaultKind> {
        if main_off < self.layout.guard_end || main_off + bytes > self.cfg.main_memory_bytes {
            return Err(FaultKind::OutOfBoundsTransfer(format!(
                "main {main_off:#x}+{bytes}"
            )));
        }
        if ldm_off + bytes > self.layout.ldm_user_end {
            return Err(FaultKind::OutOfBoundsTransfer(format!("LDM {ldm_off:#x}+{bytes}")));
        }
        let cost = self.cost().dma_setup + bytes.div_ceil(8) * self.cost().dma_per_8_bytes;
        self.charge(cpe, cost);
        if put {
            let src = self.ldms[cpe][ldm_off as usize..(ldm_off + bytes) as usize].to_vec();
            self.main[main_off as usize..(main_off + bytes) as usize].copy_from_slice(&src);
        } else {
            let src = self.main[main_off as usize..(main_off + bytes) as usize].to_vec();
            self.ldms[cpe][ldm_off as usize..(ldm_off + bytes) as usize].copy_from_slice(&src);
        }
        self.emit(cpe, EventKind::Dma { put, bytes });
        Ok(())
    }

    /// Blocking RMA write from `src_cpe`'s LDM into `dst_cpe`'s LDM.
    pub fn rma_write(
        &mut self,
        src_cpe: usize,
        dst_cpe: usize,
        dst_off: u64,
        src_off: u64,
        bytes: u64,
    ) -> Result<(), Fault> {
        let r = (|| {
            if src_off + bytes > self.layout.ldm_user_end
                || dst_off + bytes > self.layout.ldm_user_end
            {
                return Err(FaultKind::OutOfBoundsTransfer(format!(
                    "rma {src_off:#x}->{dst_off:#x}+{bytes}"
                )));
            }
            if dst_cpe >= self.cfg.cpe_count {
                return Err(FaultKind::OutOfBoundsTransfer(format!("rma to cpe{dst_cpe}")));
            }
            let cost = self.cost().rma_setup + bytes.div_ceil(8) * self.cost().rma_per_8_bytes;
            self.charge(src_cpe, cost);
            let data = self.ldms[src_cpe][src_off as usize..(src_off + bytes) as usize].to_vec();
            self.ldms[dst_cpe][dst_off as usize..(dst_off + bytes) as usize].copy_from_slice(&data);
            self.emit(src_cpe, EventKind::Rma { to: dst_cpe as u8, bytes });
            Ok(())
        })();
        r.map_err(|k| self.fault_on(src_cpe, k))
    }

    /// Fire-and-forget RMA used by the job-server broadcast: the issuing core
    /// pays only the issue cost; the payload lands atomically after the
    /// engine latency.
    pub(crate) fn rma_issue(&mut self, src: usize, dst_cpe: usize, dst_off: u64, bytes: Vec<u8>) {
        let latency = self.cost().rma_setup
            + (bytes.len() as u64).div_ceil(8) * self.cost().rma_per_8_bytes;
        let at = self.cores[src].cycle + latency;
        self.delivery_seq += 1;
        self.rma_outstanding[src] += 1;
        self.emit(src, EventKind::Rma { to: dst_cpe as u8, bytes: bytes.len() as u64 });
        self.deliveries.push(Reverse(Delivery {
            at,
            seq: self.delivery_seq,
            src,
            dst_core: dst_cpe,
            dst_off,
            bytes,
        }));
    }

    fn apply_deliveries_until(&mut self, cycle: u64) {
        while let Some(Reverse(d)) = self.deliveries.peek() {
            if d.at > cycle {
                break;
            }
            let Reverse(d) = self.deliveries.pop().unwrap();
            self.ldms[d.dst_core][d.dst_off as usize..d.dst_off as usize + d.bytes.len()]
                .copy_from_slice(&d.bytes);
            self.rma_outstanding[d.src] -= 1;
        }
    }

    /// Indivisible test-and-set on a main-memory word; bypasses the caches.
    pub fn atomic_test_and_set(&mut self, core: usize, main_off: u64) -> Result<u64, Fault> {
        (|| {
            if main_off + 8 > self.cfg.main_memory_bytes || main_off < self.layout.guard_end {
                return Err(FaultKind::WildAddress(format!("atomic at {main_off:#x}")));
            }
            let cost = self.cost().atomic_op;
            self.charge(core, cost);
            let o = main_off as usize;
            let prev = u64::from_le_bytes(self.main[o..o + 8].try_into().unwrap());
            self.main[o..o + 8].copy_from_slice(&1u64.to_le_bytes());
            Ok(prev)
        })()
        .map_err(|k| self.fault_on(core, k))
    }

    pub(crate) fn atomic_clear(&mut self, core: usize, main_off: u64) {
        let cost = self.cost().atomic_op;
        self.charge(core, cost);
        let o = main_off as usize;
        self.main[o..o + 8].copy_from_slice(&0u64.to_le_bytes());
    }

    /// Write back and invalidate the core's cache. Returns writebacks.
    pub fn cache_flush(&mut self, cpe: usize) -> u64 {
        let wb = self.caches[cpe].flush(&mut self.main);
        let cost = self.cost().instruction + wb * self.cost().main_memory_access;
        self.charge(cpe, cost);
        self.emit(cpe, EventKind::CacheFlush { writebacks: wb });
        wb
    }

    pub(crate) fn fault_on(&mut self, core: usize, kind: FaultKind) -> Fault {
        let fault = Fault { core: self.core_label(core), cycle: self.cores[core].cycle, kind };
        self.emit(core, EventKind::Fault { what: fault.kind.to_string() });
        self.fault = Some(fault.clone());
        fault
    }

    // ---- scheduler ------------------------------------------------------------

    fn runnable(&self, core: usize) -> bool {
        if self.is_mpe(core) {
            return self.mpe_proto.is_some()
                || matches!(self.cores[core].state, CoreState::Running(_));
        }
        matches!(
            self.cores[core].state,
            CoreState::Serving(_)
                | CoreState::StartTask { .. }
                | CoreState::Running(_)
                | CoreState::RmaFence { .. }
        )
    }

    fn tie_rank(&self, core: usize) -> u64 {
        // splitmix-style mix of (seed, slice, core) for a deterministic
        // per-slice permutation
        let mut x = self
            .seed
            .wrapping_mul(0x9e3779b97f4a7c15)
            .wrapping_add(self.slice_index)
            .wrapping_mul(0xbf58476d1ce4e5b9)
            .wrapping_add(core as u64 + 1);
        x ^= x >> 30;
        x = x.wrapping_mul(0xbf58476d1ce4e5b9);
        x ^= x >> 27;
        x = x.wrapping_mul(0x94d049bb133111eb);
        x ^ (x >> 31)
    }

    /// Advance the deterministic scheduler by one core slice.
    pub fn step(&mut self) -> Result<StepOutcome, Fault> {
        if let Some(f) = &self.fault {
            return Err(f.clone());
        }
        self.slice_index += 1;
        let mut best: Option<(u64, u64, usize)> = None;
        for core in 0..self.cores.len() {
            if !self.runnable(core) {
                continue;
            }
            let key = (self.cores[core].cycle, self.tie_rank(core), core);
            if best.map_or(true, |(c, r, i)| key < (c, r, i)) {
                best = Some(key);
            }
        }
        let Some((cycle, _, core)) = best else {
            // nothing can run: either everything is done or we deadlocked
            let mpe = self.mpe_index();
            if matches!(self.cores[mpe].state, CoreState::Halted) && self.mpe_proto.is_none() {
                return Ok(StepOutcome::MpeHalted);
            }
            return Err(self.fault_on(mpe, FaultKind::Deadlock));
        };
        if cycle > self.cfg.max_cycles {
            return Err(self.fault_on(core, FaultKind::CycleLimit));
        }
        self.apply_deliveries_until(cycle);
        if self.is_mpe(core) && self.mpe_proto.is_some() {
            self.step_proto()?;
        } else {
            self.step_core(core)?;
        }
        let mpe = self.mpe_index();
        if matches!(self.cores[mpe].state, CoreState::Halted) && self.mpe_proto.is_none() {
            return Ok(StepOutcome::MpeHalted);
        }
        Ok(StepOutcome::Progress)
    }

    /// Run until the host main returns.
    pub fn run(&mut self) -> Result<RunOutcome, Fault> {
        loop {
            match self.step()? {
                StepOutcome::Progress => {}
                StepOutcome::MpeHalted => return Ok(RunOutcome::Halted),
            }
        }
    }

    /// Run until the pending MPE protocol op completes (API-driven mode).
    pub(crate) fn run_proto(&mut self) -> Result<(), Fault> {
        while self.mpe_proto.is_some() {
            self.step()?;
        }
        Ok(())
    }
}

pub use trace::{EmuEvent as Event, EventKind as EmuEventKind};

#[allow(unused_imports)]
pub(crate) use trace::{SyncBarrier as _SB, SyncPhase as _SP};

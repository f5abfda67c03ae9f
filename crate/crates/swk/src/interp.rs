//! Serial reference interpreter.
//!
//! Executes validated units directly from the AST, with target regions run as
//! `cpe_count` logical instances advanced one at a time. Instances suspend at
//! barriers (and at the implicit barrier closing a `single` region) so that
//! cross-instance visibility matches the parallel execution of the compiled
//! image on race-free programs.
//!
//! This module is the oracle side of differential tests: it never touches the
//! pass pipeline, the instruction set or the emulator.

use std::cell::RefCell;
use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::rc::Rc;

use crate::frontend::ast::*;

#[derive(Debug, Clone)]
pub struct InterpOptions {
    pub cpe_count: usize,
    pub vnest_gcnt: i64,
    pub vnest_tcnt: i64,
    pub stdin: Vec<i64>,
    pub max_steps: u64,
}

impl Default for InterpOptions {
    fn default() -> Self {
        InterpOptions {
            cpe_count: 64,
            vnest_gcnt: 8,
            vnest_tcnt: 8,
            stdin: Vec::new(),
            max_steps: 500_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterpOutcome {
    /// Canonical snapshot of every global (routine handles excluded):
    /// scalars as 8 little-endian bytes, arrays flat column-major,
    /// records as tag word plus fields.
    pub globals: Vec<(String, Vec<u8>)>,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InterpError {
    OutOfBounds { name: String, detail: String },
    DivideByZero,
    ZeroStep,
    Deadlock,
    StdinExhausted,
    CriticalDiscipline(String),
    JoinWithoutSpawn,
    SpawnWhileActive,
    BadSpawnTarget(String),
    StepLimit,
    Undefined(String),
    Unsupported(String),
}

impl fmt::Display for InterpError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InterpError::OutOfBounds { name, detail } => {
                write!(f, "subscript out of bounds on '{name}': {detail}")
            }
            InterpError::DivideByZero => write!(f, "integer division by zero"),
            InterpError::ZeroStep => write!(f, "do loop step is zero"),
            InterpError::Deadlock => write!(f, "deadlock: instances blocked at a barrier while others finished"),
            InterpError::StdinExhausted => write!(f, "read_int64 past end of input"),
            InterpError::CriticalDiscipline(m) => write!(f, "critical section discipline: {m}"),
            InterpError::JoinWithoutSpawn => write!(f, "join without a matching spawn"),
            InterpError::SpawnWhileActive => write!(f, "spawn while a spawned task is active"),
            InterpError::BadSpawnTarget(m) => write!(f, "bad spawn target: {m}"),
            InterpError::StepLimit => write!(f, "step limit exceeded"),
            InterpError::Undefined(n) => write!(f, "undefined name '{n}' at execution"),
            InterpError::Unsupported(m) => write!(f, "unsupported: {m}"),
        }
    }
}

type IResult<T> = Result<T, InterpError>;

// ---- values ------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum IVal {
    I(i64),
    F(f64),
    /// Routine handle, by name; empty string is the null handle.
    H(String),
}

#[derive(Debug, Clone)]
enum Data {
    I(Vec<i64>),
    F(Vec<f64>),
}

#[derive(Debug, Clone)]
struct ArrVal {
    rank: usize,
    lb: [i64; 3],
    ext: [i64; 3],
    data: Data,
}

impl ArrVal {
    fn new(elem: ScalarTy, shape: &ArrayShape) -> ArrVal {
        let mut lb = [1i64; 3];
        let mut ext = [1i64; 3];
        let mut n = 1usize;
        for (k, e) in shape.extents.iter().enumerate() {
            let Extent::Fixed { lb: l, ub } = e else {
                panic!("deferred extent in concrete array");
            };
            lb[k] = *l;
            ext[k] = ub - l + 1;
            n *= ext[k] as usize;
        }
        let data = match elem {
            ScalarTy::Int64 => Data::I(vec![0; n]),
            ScalarTy::Float64 => Data::F(vec![0.0; n]),
        };
        ArrVal { rank: shape.rank(), lb, ext, data }
    }

    fn flat(&self, idx: &[i64], name: &str) -> IResult<usize> {
        let mut off = 0i64;
        let mut stride = 1i64;
        for k in 0..self.rank {
            let i = idx[k];
            if i < self.lb[k] || i >= self.lb[k] + self.ext[k] {
                return Err(InterpError::OutOfBounds {
                    name: name.to_string(),
                    detail: format!(
                        "subscript {} = {} outside {}..{}",
                        k + 1,
                        i,
                        self.lb[k],
                        self.lb[k] + self.ext[k] - 1
                    ),
                });
            }
            off += (i - self.lb[k]) * stride;
            stride *= self.ext[k];
        }
        Ok(off as usize)
    }

    fn get(&self, i: usize) -> IVal {
        match &self.data {
            Data::I(v) => IVal::I(v[i]),
            Data::F(v) => IVal::F(v[i]),
        }
    }

    fn set(&mut self, i: usize, v: IVal) {
        match (&mut self.data, v) {
            (Data::I(d), IVal::I(x)) => d[i] = x,
            (Data::F(d), IVal::F(x)) => d[i] = x,
            (Data::F(d), IVal::I(x)) => d[i] = x as f64,
            _ => panic!("type confusion in array store"),
        }
    }
}

#[derive(Debug, Clone)]
enum FVal {
    S(IVal),
    A(ArrVal),
}

#[derive(Debug, Clone)]
struct RecVal {
    /// Dynamic type: index into the record table. Set at declaration.
    rec: usize,
    fields: Vec<FVal>,
}

type ScalarCell = Rc<RefCell<IVal>>;
type ArrCell = Rc<RefCell<ArrVal>>;
type RecCell = Rc<RefCell<RecVal>>;

#[derive(Clone)]
enum IPlace {
    Var(ScalarCell),
    Elem(ArrCell, usize),
    Field(RecCell, usize),
    FieldElem(RecCell, usize, usize),
}

impl IPlace {
    fn read(&self) -> IVal {
        match self {
            IPlace::Var(c) => c.borrow().clone(),
            IPlace::Elem(a, i) => a.borrow().get(*i),
            IPlace::Field(r, f) => match &r.borrow().fields[*f] {
                FVal::S(v) => v.clone(),
                FVal::A(_) => panic!("array field read as scalar"),
            },
            IPlace::FieldElem(r, f, i) => match &r.borrow().fields[*f] {
                FVal::A(a) => a.get(*i),
                FVal::S(_) => panic!("scalar field indexed"),
            },
        }
    }

    fn write(&self, v: IVal) {
        match self {
            IPlace::Var(c) => {
                let mut b = c.borrow_mut();
                let coerced = match (&*b, v) {
                    (IVal::F(_), IVal::I(x)) => IVal::F(x as f64),
                    (_, other) => other,
                };
                *b = coerced;
            }
            IPlace::Elem(a, i) => a.borrow_mut().set(*i, v),
            IPlace::Field(r, f) => {
                let mut b = r.borrow_mut();
                let coerced = match (&b.fields[*f], v) {
                    (FVal::S(IVal::F(_)), IVal::I(x)) => IVal::F(x as f64),
                    (_, other) => other,
                };
                b.fields[*f] = FVal::S(coerced);
            }
            IPlace::FieldElem(r, f, i) => {
                let mut b = r.borrow_mut();
                match &mut b.fields[*f] {
                    FVal::A(a) => a.set(*i, v),
                    FVal::S(_) => panic!("scalar field indexed"),
                }
            }
        }
    }
}

#[derive(Clone)]
enum IBind<'a> {
    Scalar(ScalarCell),
    ScalarRef(IPlace),
    Array(ArrCell),
    Record(RecCell),
    Closure { routine: &'a Routine, env: Env<'a> },
}

struct EnvNode<'a> {
    map: RefCell<HashMap<String, IBind<'a>>>,
    parent: Option<Env<'a>>,
}

type Env<'a> = Rc<EnvNode<'a>>;

fn env_child<'a>(parent: &Env<'a>) -> Env<'a> {
    Rc::new(EnvNode { map: RefCell::new(HashMap::new()), parent: Some(parent.clone()) })
}

fn env_lookup<'a>(env: &Env<'a>, name: &str) -> Option<IBind<'a>> {
    let mut cur = Some(env.clone());
    while let Some(e) = cur {
        if let Some(b) = e.map.borrow().get(name) {
            return Some(b.clone());
        }
        cur = e.parent.clone();
    }
    None
}

// ---- records -----------------------------------------------------------

struct RecDef<'a> {
    #[allow(dead_code)]
    name: &'a str,
    parent: Option<usize>,
    /// Flattened (inherited first).
    fields: Vec<(&'a str, &'a Type)>,
    methods: Vec<&'a Routine>,
}

// ---- interpreter -------------------------------------------------------

pub fn run_serial(units: &[ProgramUnit], opts: &InterpOptions) -> IResult<InterpOutcome> {
    let mut it = Interp::new(units, opts)?;
    it.run()?;
    Ok(InterpOutcome { globals: it.canonical_globals(), output: it.output })
}

struct Interp<'a> {
    opts: InterpOptions,
    funcs: HashMap<&'a str, &'a Routine>,
    records: Vec<RecDef<'a>>,
    rec_index: HashMap<&'a str, usize>,
    globals_env: Env<'a>,
    global_order: Vec<&'a VarDecl>,
    output: String,
    stdin: VecDeque<i64>,
    steps: u64,
    spawn_active: bool,
}

impl<'a> Interp<'a> {
    fn new(units: &'a [ProgramUnit], opts: &InterpOptions) -> IResult<Interp<'a>> {
        let mut funcs = HashMap::new();
        let mut records = Vec::new();
        let mut rec_index = HashMap::new();
        for u in units {
            for r in &u.routines {
                funcs.insert(r.name.as_str(), r);
            }
            for rec in &u.record_types {
                let idx = records.len();
                rec_index.insert(rec.name.as_str(), idx);
                records.push(RecDef {
                    name: rec.name.as_str(),
                    parent: None, // filled after all are known
                    fields: Vec::new(),
                    methods: rec.methods.iter().collect(),
                });
            }
        }
        // resolve parents and flatten fields
        let mut parents = Vec::new();
        for u in units {
            for rec in &u.record_types {
                parents.push(rec.parent.as_deref().map(|p| rec_index[p]));
            }
        }
        for (i, p) in parents.into_iter().enumerate() {
            records[i].parent = p;
        }
        let mut all_recs: Vec<&RecordType> = Vec::new();
        for u in units {
            for rec in &u.record_types {
                all_recs.push(rec);
            }
        }
        for i in 0..records.len() {
            let mut fields: Vec<(&str, &Type)> = Vec::new();
            collect_fields(i, &records, &all_recs, &mut fields);
            records[i].fields = fields;
        }

        let globals_env = Rc::new(EnvNode { map: RefCell::new(HashMap::new()), parent: None });
        let mut global_order = Vec::new();
        let it = Interp {
            opts: opts.clone(),
            funcs,
            records,
            rec_index,
            globals_env: globals_env.clone(),
            global_order: Vec::new(),
            output: String::new(),
            stdin: opts.stdin.iter().copied().collect(),
            steps: 0,
            spawn_active: false,
        };
        for u in units {
            for g in &u.globals {
                let bind = it.fresh_binding(&g.ty);
                globals_env.map.borrow_mut().insert(g.name.clone(), bind);
                global_order.push(g);
            }
        }
        let mut it = it;
        it.global_order = global_order;
        Ok(it)
    }

    fn fresh_binding(&self, ty: &Type) -> IBind<'a> {
        match ty {
            Type::Int64 => IBind::Scalar(Rc::new(RefCell::new(IVal::I(0)))),
            Type::Float64 => IBind::Scalar(Rc::new(RefCell::new(IVal::F(0.0)))),
            Type::RoutineHandle => IBind::Scalar(Rc::new(RefCell::new(IVal::H(String::new())))),
            Type::Array(elem, shape) => {
                IBind::Array(Rc::new(RefCell::new(ArrVal::new(*elem, shape))))
            }
            Type::Record(name) => {
                let idx = self.rec_index[name.as_str()];
                IBind::Record(Rc::new(RefCell::new(self.fresh_record(idx))))
            }
        }
    }

    fn fresh_record(&self, idx: usize) -> RecVal {
        let fields = self.records[idx]
            .fields
            .iter()
            .map(|(_, ty)| match ty {
                Type::Int64 => FVal::S(IVal::I(0)),
                Type::Float64 => FVal::S(IVal::F(0.0)),
                Type::Array(elem, shape) => FVal::A(ArrVal::new(*elem, shape)),
                _ => unreachable!("checked by sema"),
            })
            .collect();
        RecVal { rec: idx, fields }
    }

    fn run(&mut self) -> IResult<()> {
        let main = *self.funcs.get("main").ok_or_else(|| InterpError::Undefined("main".into()))?;
        let env = self.routine_env(main, &self.globals_env.clone());
        let mut inst = Instance::new(0, env, &main.body);
        loop {
            match self.step(&mut inst, Mode::Host)? {
                Step::Progress => {}
                Step::Finished => return Ok(()),
                Step::Blocked => return Err(InterpError::Deadlock),
            }
        }
    }

    /// Frame env for a routine activation: child of `parent_env` with the
    /// routine's nested routines bound as closures over this activation.
    fn routine_env(&self, r: &'a Routine, parent_env: &Env<'a>) -> Env<'a> {
        let env = env_child(parent_env);
        for n in &r.nested {
            env.map
                .borrow_mut()
                .insert(n.name.clone(), IBind::Closure { routine: n, env: env.clone() });
        }
        env
    }

    // ---- canonical snapshot -------------------------------------------

    fn canonical_globals(&self) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        for g in &self.global_order {
            if matches!(g.ty, Type::RoutineHandle) {
                continue;
            }
            let bind = env_lookup(&self.globals_env, &g.name).expect("global bound");
            let mut bytes = Vec::new();
            match bind {
                IBind::Scalar(c) => push_scalar(&mut bytes, &c.borrow()),
                IBind::Array(a) => push_array(&mut bytes, &a.borrow()),
                IBind::Record(r) => {
                    let r = r.borrow();
                    bytes.extend_from_slice(&((r.rec as u64 + 1).to_le_bytes()));
                    for f in &r.fields {
                        match f {
                            FVal::S(v) => push_scalar(&mut bytes, v),
                            FVal::A(a) => push_array(&mut bytes, a),
                        }
                    }
                }
                _ => unreachable!(),
            }
            out.push((g.name.clone(), bytes));
        }
        out
    }

    // ---- small-step machinery -------------------------------------------

    fn step(&mut self, inst: &mut Instance<'a>, mode: Mode) -> IResult<Step> {
        self.steps += 1;
        if self.steps > self.opts.max_steps {
            return Err(InterpError::StepLimit);
        }
        let Some(frame) = inst.frames.last_mut() else {
            return Ok(Step::Finished);
        };
        let Some(cont) = frame.control.last_mut() else {
            inst.frames.pop();
            if inst.frames.is_empty() {
                return Ok(Step::Finished);
            }
            return Ok(Step::Progress);
        };
        match cont {
            ICont::Seq { stmts, next } => {
                if *next >= stmts.len() {
                    frame.control.pop();
                    return Ok(Step::Progress);
                }
                let stmt = &stmts[*next];
                *next += 1;
                self.exec_stmt(inst, stmt, mode)
            }
            ICont::Loop { place, end, step, body, started } => {
                let place = place.clone();
                let (end, step_v) = (*end, *step);
                if *started {
                    let IVal::I(v) = place.read() else { unreachable!() };
                    place.write(IVal::I(v.wrapping_add(step_v)));
                } else {
                    *started = true;
                }
                let IVal::I(v) = place.read() else { unreachable!() };
                let cont = if step_v > 0 { v <= end } else { v >= end };
                if cont {
                    let body = *body;
                    inst.frames.last_mut().unwrap().control.push(ICont::Seq { stmts: body, next: 0 });
                } else {
                    inst.frames.last_mut().unwrap().control.pop();
                }
                Ok(Step::Progress)
            }
            ICont::BarrierPoint => {
                if mode == Mode::Host {
                    frame.control.pop();
                    Ok(Step::Progress)
                } else {
                    // stays on the control stack; the scheduler pops it on release
                    Ok(Step::Blocked)
                }
            }
        }
    }

    fn exec_stmt(&mut self, inst: &mut Instance<'a>, stmt: &'a Stmt, mode: Mode) -> IResult<Step> {
        match stmt {
            Stmt::Local(v) => {
                let bind = self.fresh_binding(&v.ty);
                inst.env().map.borrow_mut().insert(v.name.clone(), bind);
                Ok(Step::Progress)
            }
            Stmt::Assign { target, value, .. } => {
                let v = self.eval(inst, value)?;
                let place = self.place(inst, target)?;
                place.write(v);
                Ok(Step::Progress)
            }
            Stmt::Do { var, from, to, step, body, .. } => {
                let IVal::I(from) = self.eval(inst, from)? else { unreachable!() };
                let IVal::I(end) = self.eval(inst, to)? else { unreachable!() };
                let step_v = match step {
                    Some(e) => match self.eval(inst, e)? {
                        IVal::I(s) => s,
                        _ => unreachable!(),
                    },
                    None => 1,
                };
                if step_v == 0 {
                    return Err(InterpError::ZeroStep);
                }
                let place = self.var_place(inst, var)?;
                place.write(IVal::I(from));
                inst.frames
                    .last_mut()
                    .unwrap()
                    .control
                    .push(ICont::Loop { place, end, step: step_v, body, started: false });
                Ok(Step::Progress)
            }
            Stmt::If { cond, then_body, else_body, .. } => {
                let IVal::I(c) = self.eval(inst, cond)? else { unreachable!() };
                let body: &'a Block = if c != 0 {
                    then_body
                } else if let Some(e) = else_body {
                    e
                } else {
                    return Ok(Step::Progress);
                };
                inst.frames.last_mut().unwrap().control.push(ICont::Seq { stmts: body, next: 0 });
                Ok(Step::Progress)
            }
            Stmt::Call { callee, args, .. } => self.exec_call(inst, callee, args, mode),
            Stmt::Return { .. } => {
                inst.frames.pop();
                if inst.frames.is_empty() {
                    return Ok(Step::Finished);
                }
                Ok(Step::Progress)
            }
            Stmt::Target { body, private, .. } => {
                if mode == Mode::Device {
                    return Err(InterpError::Unsupported("nested target region".into()));
                }
                self.run_region(inst, body, private)?;
                Ok(Step::Progress)
            }
            Stmt::Master { body, .. } => {
                let run = mode == Mode::Host || inst.core == 0;
                if run {
                    inst.frames.last_mut().unwrap().control.push(ICont::Seq { stmts: body, next: 0 });
                }
                Ok(Step::Progress)
            }
            Stmt::Single { body, .. } => {
                // implicit trailing barrier for everyone; body on instance 0
                let frame = inst.frames.last_mut().unwrap();
                if mode == Mode::Device {
                    frame.control.push(ICont::BarrierPoint);
                }
                if mode == Mode::Host || inst.core == 0 {
                    inst.frames.last_mut().unwrap().control.push(ICont::Seq { stmts: body, next: 0 });
                }
                Ok(Step::Progress)
            }
            Stmt::Barrier { .. } => {
                if mode == Mode::Host {
                    Ok(Step::Progress)
                } else {
                    inst.frames.last_mut().unwrap().control.push(ICont::BarrierPoint);
                    Ok(Step::Blocked)
                }
            }
            Stmt::CriticalEnter { .. } => {
                if inst.critical_depth > 0 {
                    return Err(InterpError::CriticalDiscipline(
                        "critical sections are not reentrant".into(),
                    ));
                }
                inst.critical_depth = 1;
                Ok(Step::Progress)
            }
            Stmt::CriticalExit { .. } => {
                if inst.critical_depth == 0 {
                    return Err(InterpError::CriticalDiscipline("exit without enter".into()));
                }
                inst.critical_depth = 0;
                Ok(Step::Progress)
            }
            Stmt::DispatchSite { .. } => {
                Err(InterpError::Unsupported("dispatch site in reference interpretation".into()))
            }
        }
    }

    fn exec_call(
        &mut self,
        inst: &mut Instance<'a>,
        callee: &'a Callee,
        args: &'a [Expr],
        mode: Mode,
    ) -> IResult<Step> {
        match callee {
            Callee::Named(name) => {
                if let Some(intr) = crate::frontend::sema::Intrinsic::from_name(name) {
                    return self.exec_intrinsic(inst, intr, args, mode);
                }
                // nested closure shadows top-level
                if let Some(IBind::Closure { routine, env }) = env_lookup(inst.env(), name) {
                    return self.push_call(inst, routine, &env, args, None);
                }
                let Some(&r) = self.funcs.get(name.as_str()) else {
                    return Err(InterpError::Undefined(name.clone()));
                };
                let genv = self.globals_env.clone();
                self.push_call(inst, r, &genv, args, None)
            }
            Callee::Method { recv, method } | Callee::DirectMethod { recv, method, .. } => {
                // reference semantics: always dynamic dispatch
                let rc = self.record_cell(inst, recv)?;
                let tag = rc.borrow().rec;
                let mut cur = Some(tag);
                let mut found = None;
                while let Some(i) = cur {
                    if let Some(&m) = self.records[i].methods.iter().find(|m| m.name == *method) {
                        found = Some(m);
                        break;
                    }
                    cur = self.records[i].parent;
                }
                let Some(m) = found else {
                    return Err(InterpError::Undefined(format!("{method} on record")));
                };
                let genv = self.globals_env.clone();
                self.push_call(inst, m, &genv, args, Some(rc))
            }
        }
    }

    fn push_call(
        &mut self,
        inst: &mut Instance<'a>,
        r: &'a Routine,
        defining_env: &Env<'a>,
        args: &'a [Expr],
        receiver: Option<RecCell>,
    ) -> IResult<Step> {
        let env = self.routine_env(r, defining_env);
        if let Some(rc) = receiver {
            env.map.borrow_mut().insert("self".into(), IBind::Record(rc));
        }
        for (p, a) in r.params.iter().zip(args) {
            let bind = self.bind_arg(inst, p, a)?;
            env.map.borrow_mut().insert(p.name.clone(), bind);
        }
        inst.frames.push(IFrame { env, control: vec![ICont::Seq { stmts: &r.body, next: 0 }] });
        Ok(Step::Progress)
    }

    fn bind_arg(&mut self, inst: &mut Instance<'a>, p: &VarDecl, a: &'a Expr) -> IResult<IBind<'a>> {
        match &p.ty {
            Type::Int64 | Type::Float64 | Type::RoutineHandle => match a {
                Expr::Desig(d) => Ok(IBind::ScalarRef(self.place(inst, d)?)),
                other => {
                    let v = self.eval(inst, other)?;
                    let v = match (&p.ty, v) {
                        (Type::Float64, IVal::I(x)) => IVal::F(x as f64),
                        (_, v) => v,
                    };
                    Ok(IBind::Scalar(Rc::new(RefCell::new(v))))
                }
            },
            Type::Array(..) => {
                let Expr::Desig(d) = a else {
                    return Err(InterpError::Unsupported("array argument must be a variable".into()));
                };
                match self.agg_lookup(inst, d)? {
                    AggRef::Arr(a) => Ok(IBind::Array(a)),
                    AggRef::Rec(_) => Err(InterpError::Unsupported("record passed as array".into())),
                }
            }
            Type::Record(_) => {
                let Expr::Desig(d) = a else {
                    return Err(InterpError::Unsupported("record argument must be a variable".into()));
                };
                match self.agg_lookup(inst, d)? {
                    AggRef::Rec(rc) => Ok(IBind::Record(rc)),
                    _ => Err(InterpError::Unsupported("expected record variable".into())),
                }
            }
        }
    }

    fn exec_intrinsic(
        &mut self,
        inst: &mut Instance<'a>,
        intr: crate::frontend::sema::Intrinsic,
        args: &'a [Expr],
        mode: Mode,
    ) -> IResult<Step> {
        use crate::frontend::sema::Intrinsic as I;
        match intr {
            I::GetCoreid => {
                let core = if mode == Mode::Device { inst.core as i64 } else { 0 };
                let place = match &args[0] {
                    Expr::Desig(d) => self.place(inst, d)?,
                    _ => unreachable!("checked by sema"),
                };
                place.write(IVal::I(core));
                Ok(Step::Progress)
            }
            I::GetVnestid => {
                let (gcnt, tcnt) = if mode == Mode::Device {
                    (self.opts.vnest_gcnt, self.opts.vnest_tcnt)
                } else {
                    (1, 1)
                };
                let core = if mode == Mode::Device { inst.core as i64 } else { 0 };
                let vals = [core / tcnt, core % tcnt, gcnt, tcnt, tcnt];
                for (a, v) in args.iter().zip(vals) {
                    let place = match a {
                        Expr::Desig(d) => self.place(inst, d)?,
                        _ => unreachable!(),
                    };
                    place.write(IVal::I(v));
                }
                Ok(Step::Progress)
            }
            I::ReadInt64 => {
                if mode == Mode::Device {
                    return Err(InterpError::Unsupported("read_int64 on device".into()));
                }
                let v = self.stdin.pop_front().ok_or(InterpError::StdinExhausted)?;
                let place = match &args[0] {
                    Expr::Desig(d) => self.place(inst, d)?,
                    _ => unreachable!(),
                };
                place.write(IVal::I(v));
                Ok(Step::Progress)
            }
            I::PrintInt64 => {
                if mode == Mode::Device {
                    return Err(InterpError::Unsupported("print_int64 on device".into()));
                }
                let IVal::I(v) = self.eval(inst, &args[0])? else { unreachable!() };
                self.output.push_str(&format!("{v}\n"));
                Ok(Step::Progress)
            }
            I::PrintFloat64 => {
                if mode == Mode::Device {
                    return Err(InterpError::Unsupported("print_float64 on device".into()));
                }
                let IVal::F(v) = self.eval(inst, &args[0])? else { unreachable!() };
                self.output.push_str(&format!("{v}\n"));
                Ok(Step::Progress)
            }
            I::Spawn => {
                if mode == Mode::Device {
                    return Err(InterpError::Unsupported("spawn on device".into()));
                }
                if self.spawn_active {
                    return Err(InterpError::SpawnWhileActive);
                }
                let target = match &args[0] {
                    Expr::Desig(d) if d.parts.is_empty() && env_lookup(inst.env(), &d.base).is_none() => {
                        d.base.clone()
                    }
                    other => match self.eval(inst, other)? {
                        IVal::H(name) if !name.is_empty() => name,
                        IVal::H(_) => return Err(InterpError::BadSpawnTarget("null handle".into())),
                        _ => return Err(InterpError::BadSpawnTarget("not a handle".into())),
                    },
                };
                let Some(&r) = self.funcs.get(target.as_str()) else {
                    return Err(InterpError::BadSpawnTarget(target));
                };
                let Expr::Desig(d) = &args[1] else { unreachable!() };
                let AggRef::Rec(rc) = self.agg_lookup(inst, d)? else {
                    return Err(InterpError::Unsupported("spawn argument must be a record".into()));
                };
                self.spawn_active = true;
                self.run_spawned(r, rc)?;
                Ok(Step::Progress)
            }
            I::Join => {
                if !self.spawn_active {
                    return Err(InterpError::JoinWithoutSpawn);
                }
                self.spawn_active = false;
                Ok(Step::Progress)
            }
        }
    }

    // ---- target regions -------------------------------------------------

    fn run_region(
        &mut self,
        inst: &mut Instance<'a>,
        body: &'a Block,
        private: &'a [(String, crate::diag::Span)],
    ) -> IResult<()> {
        let outer_env = inst.env().clone();
        // names referenced by the region (and by trampolines it calls)
        let mut names = Vec::new();
        collect_region_names(body, &mut names);
        // collect through trampolines reachable from the region
        let mut tramp_bodies: Vec<&'a Routine> = Vec::new();
        let mut qi = 0;
        let mut call_names: Vec<String> = names.clone();
        while qi < call_names.len() {
            let n = call_names[qi].clone();
            qi += 1;
            if let Some(IBind::Closure { routine, .. }) = env_lookup(&outer_env, &n) {
                if tramp_bodies.iter().any(|t| std::ptr::eq(*t, routine)) {
                    continue;
                }
                tramp_bodies.push(routine);
                let mut inner = Vec::new();
                collect_region_names(&routine.body, &mut inner);
                for x in inner {
                    if !names.contains(&x) {
                        names.push(x.clone());
                        call_names.push(x);
                    }
                }
            }
        }

        let mut instances = Vec::new();
        for core in 0..self.opts.cpe_count {
            let env = Rc::new(EnvNode {
                map: RefCell::new(HashMap::new()),
                parent: Some(self.globals_env.clone()),
            });
            // capture: enclosing scalars by value, aggregates by reference
            for n in &names {
                if private.iter().any(|(p, _)| p == n) {
                    continue;
                }
                if let Some(bind) = lookup_non_global(&outer_env, n) {
                    let captured = match bind {
                        IBind::Scalar(c) => IBind::Scalar(Rc::new(RefCell::new(c.borrow().clone()))),
                        IBind::ScalarRef(p) => IBind::Scalar(Rc::new(RefCell::new(p.read()))),
                        IBind::Array(a) => IBind::Array(a),
                        IBind::Record(r) => IBind::Record(r),
                        IBind::Closure { routine, .. } => {
                            IBind::Closure { routine, env: env.clone() }
                        }
                    };
                    env.map.borrow_mut().insert(n.clone(), captured);
                }
            }
            // privates: fresh zero-initialized scalars
            for (p, _) in private {
                let ty = match lookup_non_global(&outer_env, p) {
                    Some(IBind::Scalar(c)) => match &*c.borrow() {
                        IVal::I(_) => Type::Int64,
                        IVal::F(_) => Type::Float64,
                        IVal::H(_) => Type::RoutineHandle,
                    },
                    Some(IBind::ScalarRef(pl)) => match pl.read() {
                        IVal::I(_) => Type::Int64,
                        IVal::F(_) => Type::Float64,
                        IVal::H(_) => Type::RoutineHandle,
                    },
                    _ => match env_lookup(&self.globals_env, p) {
                        Some(IBind::Scalar(c)) => match &*c.borrow() {
                            IVal::I(_) => Type::Int64,
                            IVal::F(_) => Type::Float64,
                            IVal::H(_) => Type::RoutineHandle,
                        },
                        _ => Type::Int64,
                    },
                };
                env.map.borrow_mut().insert(p.clone(), self.fresh_binding(&ty));
            }
            instances.push(Instance::new(core, env, body));
        }
        self.schedule_instances(instances)
    }

    fn run_spawned(&mut self, r: &'a Routine, arg: RecCell) -> IResult<()> {
        let mut instances = Vec::new();
        for core in 0..self.opts.cpe_count {
            let env = self.routine_env(r, &self.globals_env.clone());
            if let Some(p) = r.params.first() {
                env.map.borrow_mut().insert(p.name.clone(), IBind::Record(arg.clone()));
            }
            instances.push(Instance::new(core, env, &r.body));
        }
        self.schedule_instances(instances)
    }

    /// Run device instances serially, suspending at barriers; all instances
    /// blocked at barriers are released together.
    fn schedule_instances(&mut self, mut instances: Vec<Instance<'a>>) -> IResult<()> {
        loop {
            let mut progressed = false;
            for inst in instances.iter_mut() {
                if inst.done || inst.blocked {
                    continue;
                }
                progressed = true;
                loop {
                    match self.step(inst, Mode::Device)? {
                        Step::Progress => {}
                        Step::Finished => {
                            inst.done = true;
                            break;
                        }
                        Step::Blocked => {
                            inst.blocked = true;
                            break;
                        }
                    }
                }
            }
            if instances.iter().all(|i| i.done) {
                return Ok(());
            }
            if !progressed {
                // everyone is blocked or done; a full barrier releases
                if instances.iter().all(|i| i.done || i.blocked) {
                    if instances.iter().any(|i| i.done) {
                        return Err(InterpError::Deadlock);
                    }
                    for inst in instances.iter_mut() {
                        // pop the BarrierPoint each instance is sitting on
                        let frame = inst.frames.last_mut().expect("blocked frame");
                        let popped = frame.control.pop();
                        debug_assert!(matches!(popped, Some(ICont::BarrierPoint)));
                        inst.blocked = false;
                    }
                }
            }
        }
    }

    // ---- places and evaluation -------------------------------------------

    fn var_place(&mut self, inst: &mut Instance<'a>, name: &str) -> IResult<IPlace> {
        match env_lookup(inst.env(), name) {
            Some(IBind::Scalar(c)) => Ok(IPlace::Var(c)),
            Some(IBind::ScalarRef(p)) => Ok(p),
            Some(_) => Err(InterpError::Unsupported(format!("'{name}' is not a scalar"))),
            None => Err(InterpError::Undefined(name.to_string())),
        }
    }

    fn agg_lookup(&mut self, inst: &mut Instance<'a>, d: &'a Designator) -> IResult<AggRef> {
        match env_lookup(inst.env(), &d.base) {
            Some(IBind::Array(a)) if d.parts.is_empty() => Ok(AggRef::Arr(a)),
            Some(IBind::Record(r)) if d.parts.is_empty() => Ok(AggRef::Rec(r)),
            Some(_) => Err(InterpError::Unsupported(format!(
                "'{}' is not a whole array or record variable",
                d.base
            ))),
            None => Err(InterpError::Undefined(d.base.clone())),
        }
    }

    fn field_index(&self, rc: &RecCell, field: &str) -> IResult<usize> {
        let rec = rc.borrow().rec;
        // field layout is the static flattened layout of the dynamic type,
        // which always extends the static type's prefix
        self.records[rec]
            .fields
            .iter()
            .position(|(n, _)| *n == field)
            .ok_or_else(|| InterpError::Undefined(format!("field {field}")))
    }

    fn record_cell(&mut self, inst: &mut Instance<'a>, d: &'a Designator) -> IResult<RecCell> {
        match env_lookup(inst.env(), &d.base) {
            Some(IBind::Record(r)) if d.parts.is_empty() => Ok(r),
            Some(_) => Err(InterpError::Unsupported(format!("'{}' is not a record", d.base))),
            None => Err(InterpError::Undefined(d.base.clone())),
        }
    }

    fn place(&mut self, inst: &mut Instance<'a>, d: &'a Designator) -> IResult<IPlace> {
        let bind = env_lookup(inst.env(), &d.base)
            .ok_or_else(|| InterpError::Undefined(d.base.clone()))?;
        match bind {
            IBind::Scalar(c) => {
                if d.parts.is_empty() {
                    Ok(IPlace::Var(c))
                } else {
                    Err(InterpError::Unsupported(format!("'{}' has no parts", d.base)))
                }
            }
            IBind::ScalarRef(p) => {
                if d.parts.is_empty() {
                    Ok(p)
                } else {
                    Err(InterpError::Unsupported(format!("'{}' has no parts", d.base)))
                }
            }
            IBind::Array(a) => {
                let [DesigPart::Index(idx)] = &d.parts[..] else {
                    return Err(InterpError::Unsupported(format!(
                        "whole array '{}' used as a scalar",
                        d.base
                    )));
                };
                let mut iv = Vec::new();
                for e in idx {
                    let IVal::I(i) = self.eval(inst, e)? else { unreachable!() };
                    iv.push(i);
                }
                let flat = a.borrow().flat(&iv, &d.base)?;
                Ok(IPlace::Elem(a, flat))
            }
            IBind::Record(r) => match &d.parts[..] {
                [DesigPart::Field(f)] => {
                    let fi = self.field_index(&r, f)?;
                    Ok(IPlace::Field(r, fi))
                }
                [DesigPart::Field(f), DesigPart::Index(idx)] => {
                    let fi = self.field_index(&r, f)?;
                    let mut iv = Vec::new();
                    for e in idx {
                        let IVal::I(i) = self.eval(inst, e)? else { unreachable!() };
                        iv.push(i);
                    }
                    let flat = {
                        let rb = r.borrow();
                        let FVal::A(a) = &rb.fields[fi] else {
                            return Err(InterpError::Unsupported("scalar field indexed".into()));
                        };
                        a.flat(&iv, &d.base)?
                    };
                    Ok(IPlace::FieldElem(r, fi, flat))
                }
                _ => Err(InterpError::Unsupported("record designator".into())),
            },
            IBind::Closure { .. } => Err(InterpError::Unsupported(format!(
                "routine '{}' used as a variable",
                d.base
            ))),
        }
    }

    fn eval(&mut self, inst: &mut Instance<'a>, e: &'a Expr) -> IResult<IVal> {
        match e {
            Expr::Int(v, _, _) => Ok(IVal::I(*v)),
            Expr::Float(v, _, _) => Ok(IVal::F(*v)),
            Expr::HandleOf { routine, .. } => Ok(IVal::H(routine.clone())),
            Expr::Desig(d) => {
                let place = self.place(inst, d)?;
                Ok(place.read())
            }
            Expr::Unary { op, expr, .. } => {
                let v = self.eval(inst, expr)?;
                Ok(match (op, v) {
                    (UnOp::Neg, IVal::I(x)) => IVal::I(x.wrapping_neg()),
                    (UnOp::Neg, IVal::F(x)) => IVal::F(-x),
                    (UnOp::Not, IVal::I(x)) => IVal::I(i64::from(x == 0)),
                    _ => unreachable!("checked by sema"),
                })
            }
            Expr::Binary { op, lhs, rhs, .. } => {
                let l = self.eval(inst, lhs)?;
                let r = self.eval(inst, rhs)?;
                binop(*op, l, r)
            }
        }
    }
}

enum AggRef {
    Arr(ArrCell),
    Rec(RecCell),
}

fn binop(op: BinOp, l: IVal, r: IVal) -> IResult<IVal> {
    use BinOp::*;
    // promote to float if either side is float
    match (l, r) {
        (IVal::I(a), IVal::I(b)) => Ok(match op {
            Add => IVal::I(a.wrapping_add(b)),
            Sub => IVal::I(a.wrapping_sub(b)),
            Mul => IVal::I(a.wrapping_mul(b)),
            Div => {
                if b == 0 {
                    return Err(InterpError::DivideByZero);
                }
                IVal::I(a.wrapping_div(b))
            }
            Mod => {
                if b == 0 {
                    return Err(InterpError::DivideByZero);
                }
                IVal::I(a.wrapping_rem(b))
            }
            Eq => IVal::I(i64::from(a == b)),
            Ne => IVal::I(i64::from(a != b)),
            Lt => IVal::I(i64::from(a < b)),
            Le => IVal::I(i64::from(a <= b)),
            Gt => IVal::I(i64::from(a > b)),
            Ge => IVal::I(i64::from(a >= b)),
            And => IVal::I(i64::from(a != 0 && b != 0)),
            Or => IVal::I(i64::from(a != 0 || b != 0)),
        }),
        (l, r) => {
            let a = match l {
                IVal::I(x) => x as f64,
                IVal::F(x) => x,
                IVal::H(_) => return Err(InterpError::Unsupported("handle arithmetic".into())),
            };
            let b = match r {
                IVal::I(x) => x as f64,
                IVal::F(x) => x,
                IVal::H(_) => return Err(InterpError::Unsupported("handle arithmetic".into())),
            };
            Ok(match op {
                Add => IVal::F(a + b),
                Sub => IVal::F(a - b),
                Mul => IVal::F(a * b),
                Div => IVal::F(a / b),
                Eq => IVal::I(i64::from(a == b)),
                Ne => IVal::I(i64::from(a != b)),
                Lt => IVal::I(i64::from(a < b)),
                Le => IVal::I(i64::from(a <= b)),
                Gt => IVal::I(i64::from(a > b)),
                Ge => IVal::I(i64::from(a >= b)),
                Mod | And | Or => unreachable!("checked by sema"),
            })
        }
    }
}

// ---- instance state ------------------------------------------------------

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mode {
    Host,
    Device,
}

enum Step {
    Progress,
    Blocked,
    Finished,
}

enum ICont<'a> {
    Seq { stmts: &'a [Stmt], next: usize },
    Loop { place: IPlace, end: i64, step: i64, body: &'a Block, started: bool },
    BarrierPoint,
}

struct IFrame<'a> {
    env: Env<'a>,
    control: Vec<ICont<'a>>,
}

struct Instance<'a> {
    core: usize,
    frames: Vec<IFrame<'a>>,
    done: bool,
    blocked: bool,
    critical_depth: u8,
}

impl<'a> Instance<'a> {
    fn new(core: usize, env: Env<'a>, body: &'a Block) -> Instance<'a> {
        Instance {
            core,
            frames: vec![IFrame { env, control: vec![ICont::Seq { stmts: body, next: 0 }] }],
            done: false,
            blocked: false,
            critical_depth: 0,
        }
    }

    fn env(&self) -> &Env<'a> {
        &self.frames.last().expect("live frame").env
    }
}

fn lookup_non_global<'a>(env: &Env<'a>, name: &str) -> Option<IBind<'a>> {
    let mut cur = Some(env.clone());
    while let Some(e) = cur {
        if e.parent.is_none() {
            return None; // reached the globals env
        }
        if let Some(b) = e.map.borrow().get(name) {
            return Some(b.clone());
        }
        cur = e.parent.clone();
    }
    None
}

fn collect_fields<'a>(
    i: usize,
    recs: &[RecDef<'a>],
    all: &[&'a RecordType],
    out: &mut Vec<(&'a str, &'a Type)>,
) {
    if let Some(p) = recs[i].parent {
        collect_fields(p, recs, all, out);
    }
    for f in &all[i].fields {
        out.push((f.name.as_str(), &f.ty));
    }
}

/// Names referenced by a block: designator bases, loop variables and call
/// targets. Region-local declarations are *not* excluded here; the capture
/// env simply never finds them in the enclosing scope.
fn collect_region_names(block: &[Stmt], out: &mut Vec<String>) {
    fn add(out: &mut Vec<String>, n: &str) {
        if !out.iter().any(|x| x == n) {
            out.push(n.to_string());
        }
    }
    fn walk_desig(d: &Designator, out: &mut Vec<String>) {
        add(out, &d.base);
        for p in &d.parts {
            if let DesigPart::Index(idx) = p {
                for e in idx {
                    walk_expr(e, out);
                }
            }
        }
    }
    fn walk_expr(e: &Expr, out: &mut Vec<String>) {
        match e {
            Expr::Int(..) | Expr::Float(..) => {}
            Expr::HandleOf { routine, .. } => add(out, routine),
            Expr::Desig(d) => walk_desig(d, out),
            Expr::Unary { expr, .. } => walk_expr(expr, out),
            Expr::Binary { lhs, rhs, .. } => {
                walk_expr(lhs, out);
                walk_expr(rhs, out);
            }
        }
    }
    for s in block {
        match s {
            Stmt::Local(_) => {}
            Stmt::Assign { target, value, .. } => {
                walk_desig(target, out);
                walk_expr(value, out);
            }
            Stmt::Do { var, from, to, step, body, .. } => {
                add(out, var);
                walk_expr(from, out);
                walk_expr(to, out);
                if let Some(s) = step {
                    walk_expr(s, out);
                }
                collect_region_names(body, out);
            }
            Stmt::If { cond, then_body, else_body, .. } => {
                walk_expr(cond, out);
                collect_region_names(then_body, out);
                if let Some(b) = else_body {
                    collect_region_names(b, out);
                }
            }
            Stmt::Call { callee, args, .. } => {
                match callee {
                    Callee::Named(n) => add(out, n),
                    Callee::Method { recv, .. } | Callee::DirectMethod { recv, .. } => {
                        walk_desig(recv, out)
                    }
                }
                for a in args {
                    walk_expr(a, out);
                }
            }
            Stmt::Return { .. } | Stmt::Barrier { .. } | Stmt::CriticalEnter { .. }
            | Stmt::CriticalExit { .. } => {}
            Stmt::Target { body, .. }
            | Stmt::Master { body, .. }
            | Stmt::Single { body, .. } => collect_region_names(body, out),
            Stmt::DispatchSite { .. } => {}
        }
    }
}

fn push_scalar(bytes: &mut Vec<u8>, v: &IVal) {
    match v {
        IVal::I(x) => bytes.extend_from_slice(&x.to_le_bytes()),
        IVal::F(x) => bytes.extend_from_slice(&x.to_bits().to_le_bytes()),
        IVal::H(_) => bytes.extend_from_slice(&0u64.to_le_bytes()),
    }
}

fn push_array(bytes: &mut Vec<u8>, a: &ArrVal) {
    match &a.data {
        Data::I(v) => {
            for x in v {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        Data::F(v) => {
            for x in v {
                bytes.extend_from_slice(&x.to_bits().to_le_bytes());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{parse_source, validate, SourceFile};

    fn run(src: &str, opts: InterpOptions) -> InterpOutcome {
        let unit = parse_source(&SourceFile::new("t.swk", src));
        let typed = validate(unit).expect("validates");
        run_serial(std::slice::from_ref(&typed.unit), &opts).expect("runs")
    }

    fn global<'o>(out: &'o InterpOutcome, name: &str) -> &'o [u8] {
        &out.globals.iter().find(|(n, _)| n == name).unwrap().1
    }

    fn i64_at(bytes: &[u8], i: usize) -> i64 {
        i64::from_le_bytes(bytes[i * 8..(i + 1) * 8].try_into().unwrap())
    }

    #[test]
    fn serial_arithmetic_and_loops() {
        let out = run(
            "var s : int64\nroutine main()\n  var i : int64\n  do i = 1, 10\n    s = s + i\n  end do\nend routine\n",
            InterpOptions::default(),
        );
        assert_eq!(i64_at(global(&out, "s"), 0), 55);
    }

    #[test]
    fn region_strided_cover() {
        // 4 CPEs write their id into distinct slots, stride 4
        let src = r#"
var a : array(int64, 8)
routine main()
  var tid : int64
  !$omp target private(tid)
  var j : int64
  call get_coreid(tid)
  do j = 1 + tid, 8, 4
    a(j) = tid + 1
  end do
  !$omp end target
end routine
"#;
        let out = run(src, InterpOptions { cpe_count: 4, ..Default::default() });
        let a = global(&out, "a");
        let got: Vec<i64> = (0..8).map(|i| i64_at(a, i)).collect();
        assert_eq!(got, vec![1, 2, 3, 4, 1, 2, 3, 4]);
    }

    #[test]
    fn barrier_cross_instance_visibility() {
        // each instance writes its slot, then reads its neighbor's
        let src = r#"
var s : array(int64, 4)
var t : array(int64, 4)
routine main()
  var tid : int64
  !$omp target private(tid)
  call get_coreid(tid)
  s(tid + 1) = tid * 10
  !$omp barrier
  t(tid + 1) = s((tid + 1) mod 4 + 1)
  !$omp end target
end routine
"#;
        let out = run(src, InterpOptions { cpe_count: 4, ..Default::default() });
        let t = global(&out, "t");
        let got: Vec<i64> = (0..4).map(|i| i64_at(t, i)).collect();
        assert_eq!(got, vec![10, 20, 30, 0]);
    }

    #[test]
    fn divergent_barrier_deadlocks() {
        let src = r#"
routine main()
  var tid : int64
  !$omp target private(tid)
  call get_coreid(tid)
  if (tid == 0) then
    !$omp barrier
  end if
  !$omp end target
end routine
"#;
        let unit = parse_source(&SourceFile::new("t.swk", src));
        let typed = validate(unit).expect("validates");
        let err = run_serial(
            std::slice::from_ref(&typed.unit),
            &InterpOptions { cpe_count: 4, ..Default::default() },
        )
        .unwrap_err();
        assert_eq!(err, InterpError::Deadlock);
    }

    #[test]
    fn single_runs_once_master_no_barrier() {
        let src = r#"
var c : int64
var m : int64
routine main()
  var tid : int64
  !$omp target private(tid)
  !$omp single
  c = c + 1
  !$omp end single
  !$omp master
  m = m + 1
  !$omp end master
  !$omp end target
end routine
"#;
        let out = run(src, InterpOptions { cpe_count: 8, ..Default::default() });
        assert_eq!(i64_at(global(&out, "c"), 0), 1);
        assert_eq!(i64_at(global(&out, "m"), 0), 1);
    }

    #[test]
    fn critical_counter() {
        let src = r#"
var c : int64
routine main()
  !$omp target
  !$omp critical
  c = c + 1
  !$omp end critical
  !$omp end target
end routine
"#;
        let out = run(src, InterpOptions { cpe_count: 64, ..Default::default() });
        assert_eq!(i64_at(global(&out, "c"), 0), 64);
    }

    #[test]
    fn trampoline_reads_outer_local_in_region() {
        let src = r#"
var r : array(int64, 4)
routine main()
  var n : int64
  var tid : int64
  n = 7
  !$omp target private(tid)
  call get_coreid(tid)
  call put(tid)
  !$omp end target
  routine put(k: int64)
    r(k + 1) = n + k
  end routine
end routine
"#;
        let out = run(src, InterpOptions { cpe_count: 4, ..Default::default() });
        let r = global(&out, "r");
        let got: Vec<i64> = (0..4).map(|i| i64_at(r, i)).collect();
        assert_eq!(got, vec![7, 8, 9, 10]);
    }

    #[test]
    fn virtual_dispatch_uses_dynamic_type() {
        let src = r#"
record Base
  field x : int64
  routine get(out: int64)
    out = 1
  end routine
end record
record Derived extends Base
  routine get(out: int64)
    out = 2
  end routine
end record
var d : Derived
var result : int64
routine use_it(b: Base)
  call b%get(result)
end routine
routine main()
  call use_it(d)
end routine
"#;
        let out = run(src, InterpOptions { cpe_count: 1, ..Default::default() });
        assert_eq!(i64_at(global(&out, "result"), 0), 2);
    }

    #[test]
    fn spawn_join_runs_on_all_instances() {
        let src = r#"
record Args
  field base : int64
end record
var a : array(int64, 8)
var p : Args
routine worker(arg: Args)
  var tid : int64
  var j : int64
  call get_coreid(tid)
  do j = 1 + tid, 8, 8
    a(j) = arg%base + tid
  end do
end routine
routine main()
  p%base = 100
  call spawn(worker, p)
  call join()
end routine
"#;
        let out = run(src, InterpOptions { cpe_count: 8, ..Default::default() });
        let a = global(&out, "a");
        let got: Vec<i64> = (0..8).map(|i| i64_at(a, i)).collect();
        assert_eq!(got, vec![100, 101, 102, 103, 104, 105, 106, 107]);
    }

    #[test]
    fn stdin_and_print() {
        let src = r#"
routine main()
  var x : int64
  call read_int64(x)
  call print_int64(x * 2)
  call print_float64(1.5)
end routine
"#;
        let out = run(src, InterpOptions { stdin: vec![21], ..Default::default() });
        assert_eq!(out.output, "42\n1.5\n");
    }

    #[test]
    fn captured_scalar_copies_do_not_leak_back() {
        // js is captured by value; device writes to it are private copies
        let src = r#"
var seen : int64
routine main()
  var js : int64
  js = 5
  !$omp target
  js = js + 1
  !$omp end target
  seen = js
end routine
"#;
        let out = run(src, InterpOptions { cpe_count: 4, ..Default::default() });
        assert_eq!(i64_at(global(&out, "seen"), 0), 5);
    }
}

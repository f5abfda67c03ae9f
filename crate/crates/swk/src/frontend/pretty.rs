//! Pretty-printer: emits SWK source that reparses to a structurally
//! identical unit.

use super::ast::*;

pub fn format_unit(unit: &ProgramUnit) -> String {
    let mut p = Printer { out: String::new(), indent: 0 };
    for (name, _) in &unit.o2ath_entries {
        p.line(&format!("!$o2ath entry {name}"));
    }
    for g in &unit.globals {
        p.line(&format!("var {} : {}", g.name, g.ty.display()));
    }
    for e in &unit.externs {
        p.line(&format!("extern routine {}({})", e.name, params(&e.params)));
    }
    for r in &unit.record_types {
        p.record(r);
    }
    for r in &unit.routines {
        p.routine(r);
    }
    p.out
}

fn params(ps: &[VarDecl]) -> String {
    ps.iter().map(|p| format!("{} : {}", p.name, p.ty.display())).collect::<Vec<_>>().join(", ")
}

struct Printer {
    out: String,
    indent: usize,
}

impl Printer {
    fn line(&mut self, s: &str) {
        for _ in 0..self.indent {
            self.out.push_str("  ");
        }
        self.out.push_str(s);
        self.out.push('\n');
    }

    fn record(&mut self, r: &RecordType) {
        match &r.parent {
            Some(p) => self.line(&format!("record {} extends {}", r.name, p)),
            None => self.line(&format!("record {}", r.name)),
        }
        self.indent += 1;
        for f in &r.fields {
            self.line(&format!("field {} : {}", f.name, f.ty.display()));
        }
        for m in &r.methods {
            self.routine(m);
        }
        self.indent -= 1;
        self.line("end record");
    }

    fn routine(&mut self, r: &Routine) {
        self.line(&format!("routine {}({})", r.name, params(&r.params)));
        self.indent += 1;
        if r.attributes.declare_target {
            self.line("!$omp declare target");
        }
        self.block(&r.body);
        for n in &r.nested {
            self.routine(n);
        }
        self.indent -= 1;
        self.line("end routine");
    }

    fn block(&mut self, b: &Block) {
        for s in b {
            self.stmt(s);
        }
    }

    fn stmt(&mut self, s: &Stmt) {
        match s {
            Stmt::Local(v) => self.line(&format!("var {} : {}", v.name, v.ty.display())),
            Stmt::Assign { target, value, .. } => {
                self.line(&format!("{} = {}", desig(target), expr(value)));
            }
            Stmt::Do { var, from, to, step, body, .. } => {
                let mut head = format!("do {} = {}, {}", var, expr(from), expr(to));
                if let Some(st) = step {
                    head.push_str(&format!(", {}", expr(st)));
                }
                self.line(&head);
                self.indent += 1;
                self.block(body);
                self.indent -= 1;
                self.line("end do");
            }
            Stmt::If { cond, then_body, else_body, .. } => {
                self.line(&format!("if ({}) then", expr(cond)));
                self.indent += 1;
                self.block(then_body);
                self.indent -= 1;
                if let Some(eb) = else_body {
                    self.line("else");
                    self.indent += 1;
                    self.block(eb);
                    self.indent -= 1;
                }
                self.line("end if");
            }
            Stmt::Call { callee, args, .. } => {
                let args: Vec<String> = args.iter().map(expr).collect();
                let head = match callee {
                    Callee::Named(n) => format!("call {}({})", n, args.join(", ")),
                    Callee::Method { recv, method } => {
                        format!("call {}%{}({})", desig(recv), method, args.join(", "))
                    }
                    Callee::DirectMethod { recv, record, method } => {
                        // only exists after devirtualization; printed for dumps
                        format!("call {}%{}({}) ! -> {}%{}", desig(recv), method, args.join(", "), record, method)
                    }
                };
                self.line(&head);
            }
            Stmt::Return { .. } => self.line("return"),
            Stmt::Target { body, private, device, .. } => {
                let mut head = "!$omp target".to_string();
                if !private.is_empty() {
                    let names: Vec<&str> = private.iter().map(|(n, _)| n.as_str()).collect();
                    head.push_str(&format!(" private({})", names.join(", ")));
                }
                head.push_str(&format!(" device({device})"));
                self.line(&head);
                self.indent += 1;
                self.block(body);
                self.indent -= 1;
                self.line("!$omp end target");
            }
            Stmt::Master { body, .. } => {
                self.line("!$omp master");
                self.indent += 1;
                self.block(body);
                self.indent -= 1;
                self.line("!$omp end master");
            }
            Stmt::Single { body, .. } => {
                self.line("!$omp single");
                self.indent += 1;
                self.block(body);
                self.indent -= 1;
                self.line("!$omp end single");
            }
            Stmt::Barrier { .. } => self.line("!$omp barrier"),
            Stmt::CriticalEnter { .. } => self.line("!$omp critical"),
            Stmt::CriticalExit { .. } => self.line("!$omp end critical"),
            Stmt::DispatchSite { entry, device, .. } => {
                self.line(&format!("! dispatch {entry} device({device})"));
            }
        }
    }
}

fn desig(d: &Designator) -> String {
    let mut s = d.base.clone();
    for p in &d.parts {
        match p {
            DesigPart::Field(f) => {
                s.push('%');
                s.push_str(f);
            }
            DesigPart::Index(idx) => {
                let idx: Vec<String> = idx.iter().map(expr).collect();
                s.push_str(&format!("({})", idx.join(", ")));
            }
        }
    }
    s
}

fn float_text(v: f64) -> String {
    let s = format!("{v}");
    if s.contains('.') || s.contains('e') || s.contains("inf") || s.contains("NaN") {
        s
    } else {
        format!("{s}.0")
    }
}

pub fn expr(e: &Expr) -> String {
    expr_prec(e, 0)
}

/// Precedence levels: or=1, and=2, not=3, cmp=4, add=5, mul=6, unary=7.
fn prec_of(e: &Expr) -> u8 {
    match e {
        Expr::Binary { op, .. } => match op {
            BinOp::Or => 1,
            BinOp::And => 2,
            op if op.is_comparison() => 4,
            BinOp::Add | BinOp::Sub => 5,
            _ => 6,
        },
        Expr::Unary { op: UnOp::Not, .. } => 3,
        Expr::Unary { op: UnOp::Neg, .. } => 7,
        _ => 8,
    }
}

fn expr_prec(e: &Expr, parent: u8) -> String {
    let mine = prec_of(e);
    let s = match e {
        Expr::Int(v, _, _) => format!("{v}"),
        Expr::Float(v, _, _) => float_text(*v),
        Expr::Desig(d) => desig(d),
        Expr::Unary { op, expr: inner, .. } => match op {
            UnOp::Neg => format!("-{}", expr_prec(inner, mine)),
            UnOp::Not => format!("not {}", expr_prec(inner, mine)),
        },
        Expr::Binary { op, lhs, rhs, .. } => {
            if op.is_comparison() {
                // comparisons do not associate: parenthesize nested ones
                format!("{} {} {}", expr_prec(lhs, mine + 1), op.text(), expr_prec(rhs, mine + 1))
            } else {
                // left-assoc: rhs at mine+1 so equal-precedence right operands keep parens
                format!("{} {} {}", expr_prec(lhs, mine), op.text(), expr_prec(rhs, mine + 1))
            }
        }
        Expr::HandleOf { routine, .. } => format!("handle({routine})"),
    };
    if mine < parent {
        format!("({s})")
    } else {
        s
    }
}

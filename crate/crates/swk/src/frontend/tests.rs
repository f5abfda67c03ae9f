use super::ast::*;
use super::lexer::SourceFile;
use super::parser::parse_source;
use super::pretty::format_unit;
use super::sema::{validate, Binding, CallKind, Intrinsic};
use super::token::{DirKind, Tok};

fn unit(src: &str) -> ProgramUnit {
    parse_source(&SourceFile::new("t.swk", src))
}

fn ok_unit(src: &str) -> ProgramUnit {
    let u = unit(src);
    assert!(
        !crate::diag::has_errors(&u.diagnostics),
        "unexpected diagnostics: {:?}",
        u.diagnostics
    );
    u
}

const FIG6A: &str = r#"
routine exam(x: float64)
  !$omp declare target
  x = x * 0.5 + 1.0
end routine

routine main()
  var A : array(float64, 10, 256)
  var B : array(float64, 10, 256)
  var i : int64
  var j : int64
  var js : int64
  var je : int64
  var tid : int64
  js = 1
  je = 256
  do j = js, je
    do i = 1, 10
      A(i,j) = i + j
      B(i,j) = i * 2 + j
    end do
  end do
  !$omp target private(tid) device(0)
  var i : int64
  var j : int64
  call get_coreid(tid)
  DO j = js + tid, je, 64
    DO i = 1, 10
      call exam(B(i,j))
      A(i,j) = A(i,j) - B(i,j)
    END DO
  END DO
  !$omp end target
end routine
"#;

#[test]
fn parses_fig6a_shape() {
    let u = ok_unit(FIG6A);
    assert_eq!(u.routines.len(), 2);
    let exam = &u.routines[0];
    assert!(exam.attributes.declare_target);
    let main = &u.routines[1];
    let targets: Vec<&Stmt> =
        main.body.iter().filter(|s| matches!(s, Stmt::Target { .. })).collect();
    assert_eq!(targets.len(), 1);
    if let Stmt::Target { private, device, .. } = targets[0] {
        assert_eq!(private.len(), 1);
        assert_eq!(private[0].0, "tid");
        assert_eq!(*device, 0);
    }
}

#[test]
fn nested_routine_recorded_under_parent() {
    let u = ok_unit(
        "routine main()\n  var n : int64\n  n = 3\n  call inc()\n  routine inc()\n    n = n + 1\n  end routine\nend routine\n",
    );
    assert_eq!(u.routines.len(), 1);
    assert_eq!(u.routines[0].nested.len(), 1);
    assert_eq!(u.routines[0].nested[0].name, "inc");
}

#[test]
fn nested_target_region_rejected() {
    let u = unit(
        "routine main()\n!$omp target\n!$omp target\n!$omp end target\n!$omp end target\nend routine\n",
    );
    assert!(u.diagnostics.iter().any(|d| d.message.contains("may not contain another target")));
}

#[test]
fn unbalanced_target_reported() {
    let u = unit("routine main()\n!$omp target\nend routine\n");
    assert!(u
        .diagnostics
        .iter()
        .any(|d| d.message.to_lowercase().contains("unbalanced") || d.message.contains("not closed")));
}

#[test]
fn validate_fig6a() {
    let typed = validate(ok_unit(FIG6A)).expect("validates");
    // the get_coreid call resolves to the intrinsic
    assert!(typed
        .info
        .calls
        .values()
        .any(|c| c.kind == CallKind::Intrinsic(Intrinsic::GetCoreid)));
}

#[test]
fn validate_is_idempotent() {
    let typed = validate(ok_unit(FIG6A)).expect("validates");
    let again = validate(typed.unit.clone()).expect("revalidates");
    assert_eq!(typed, again);
}

#[test]
fn undefined_private_var() {
    let u = unit("routine main()\n!$omp target private(tid)\n!$omp end target\nend routine\n");
    let errs = validate(u).unwrap_err();
    assert!(errs.iter().any(|d| d.message.contains("undefined name 'tid'")));
}

#[test]
fn private_array_rejected() {
    let u = unit(
        "routine main()\n  var a : array(int64, 4)\n!$omp target private(a)\n!$omp end target\nend routine\n",
    );
    let errs = validate(u).unwrap_err();
    assert!(errs.iter().any(|d| d.message.contains("private arrays are not supported")));
}

#[test]
fn private_non_variable_rejected() {
    let u = unit(
        "routine f()\nend routine\nroutine main()\n!$omp target private(f)\n!$omp end target\nend routine\n",
    );
    let errs = validate(u).unwrap_err();
    assert!(errs.iter().any(|d| d.message.contains("is not a variable")));
}

#[test]
fn device_out_of_range() {
    let u = unit("routine main()\n!$omp target device(3)\n!$omp end target\nend routine\n");
    let errs = validate(u).unwrap_err();
    assert!(errs.iter().any(|d| d.message.contains("out of range")));
}

#[test]
fn fig6b_five_private_ints() {
    let src = r#"
var A : array(float64, 10, 8, 16)
var B : array(float64, 10, 8, 16)
routine main()
  var gid : int64
  var tid : int64
  var gcnt : int64
  var tcnt : int64
  var tsize : int64
  var ks : int64
  var ke : int64
  var js : int64
  var je : int64
  ks = 1
  ke = 16
  js = 1
  je = 8
  !$omp target private(gid, tid, gcnt, tcnt, tsize) device(1)
  var i : int64
  var j : int64
  var k : int64
  call get_vnestid(gid, tid, gcnt, tcnt, tsize)
  DO k = ks + gid, ke, gcnt
    DO j = js + tid, je, tcnt
      DO i = 1, 10
        A(i,j,k) = A(i,j,k) * B(i,j,k)
      END DO
    END DO
  END DO
  !$omp end target
end routine
"#;
    let typed = validate(ok_unit(src)).expect("validates");
    let main = typed.unit.routines.iter().find(|r| r.name == "main").unwrap();
    let Some(Stmt::Target { private, device, .. }) =
        main.body.iter().find(|s| matches!(s, Stmt::Target { .. }))
    else {
        panic!("no region");
    };
    assert_eq!(private.len(), 5);
    assert_eq!(*device, 1);
}

#[test]
fn method_call_receiver_static_type() {
    let src = r#"
record Accum
  field total : int64
  routine add(n: int64)
    self%total = self%total + n
  end routine
end record
var acc : Accum
routine main()
  call acc%add(5)
end routine
"#;
    let typed = validate(ok_unit(src)).expect("validates");
    assert!(typed
        .info
        .calls
        .values()
        .any(|c| c.kind == CallKind::Method { record: "Accum".into(), method: "add".into() }));
}

#[test]
fn record_subtype_param_ok_and_bindings() {
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
routine use_it(b: Base, out: int64)
  call b%get(out)
end routine
routine main()
  var r : int64
  call use_it(d, r)
end routine
"#;
    let typed = validate(ok_unit(src)).expect("validates");
    // receiver of the call inside use_it has static type Base
    assert!(typed
        .info
        .calls
        .values()
        .any(|c| c.kind == CallKind::Method { record: "Base".into(), method: "get".into() }));
    // the global binding resolves
    assert!(typed
        .info
        .desig
        .values()
        .any(|d| matches!(d.binding, Binding::Global(_)) && d.base_ty == Type::Record("Derived".into())));
}

#[test]
fn return_inside_region_rejected() {
    let u = unit("routine main()\n!$omp target\nreturn\n!$omp end target\nend routine\n");
    let errs = validate(u).unwrap_err();
    assert!(errs.iter().any(|d| d.message.contains("branch out of a target region")));
}

#[test]
fn roundtrip_fig6a() {
    roundtrip(FIG6A);
}

#[test]
fn roundtrip_records_and_nested() {
    roundtrip(
        r#"
!$o2ath entry helper
var g : array(int64, 0:7)
extern routine helper(x: int64)
record P
  field v : float64
end record
routine main()
  var h : routine_handle
  var p : P
  var n : int64
  h = handle(helper)
  if (n < 3 and n >= 0) then
    n = -n * (2 + 1)
  else
    n = n mod 4
  end if
  !$omp master
  n = 1
  !$omp end master
  !$omp single
  n = 2
  !$omp end single
  !$omp barrier
  !$omp critical
  n = n + 1
  !$omp end critical
  call spawn(helper, p)
  call join()
  return
  routine t(q: float64)
    p%v = q
  end routine
end routine
"#,
    );
}

fn roundtrip(src: &str) {
    let mut first = unit(src);
    assert!(
        !crate::diag::has_errors(&first.diagnostics),
        "bad input: {:?}",
        first.diagnostics
    );
    let printed = format_unit(&first);
    let mut second = parse_source(&SourceFile::new("t.swk", &printed));
    assert!(
        !crate::diag::has_errors(&second.diagnostics),
        "reparse failed: {:?}\n--- printed ---\n{}",
        second.diagnostics,
        printed
    );
    first.diagnostics.clear();
    second.diagnostics.clear();
    strip_spans(&mut first);
    strip_spans(&mut second);
    // ids are assigned in parse order; structural equality requires same order
    assert_eq!(normalize_ids(&format!("{first:?}")), normalize_ids(&format!("{second:?}")), "round-trip mismatch:\n{printed}");
}

/// Compare ignoring NodeId numbering differences (the printer may reorder
/// declarations relative to statements, which renumbers ids but preserves
/// structure).
fn normalize_ids(s: &str) -> String {
    let mut out = String::new();
    let mut chars = s.chars().peekable();
    while let Some(c) = chars.next() {
        out.push(c);
        if out.ends_with("NodeId(") {
            while chars.peek().map_or(false, |c| c.is_ascii_digit()) {
                chars.next();
            }
            out.push('N');
        }
    }
    out
}

#[test]
fn directive_accounting_on_valid_input() {
    // every directive token appears exactly once in the AST
    let (toks, _) = super::lexer::tokenize(&SourceFile::new("t.swk", FIG6A));
    let n_directives =
        toks.iter().filter(|t| matches!(t.tok, Tok::Directive(_))).count();
    let u = ok_unit(FIG6A);
    let mut in_ast = 0usize;
    in_ast += u.o2ath_entries.len();
    for r in &u.routines {
        in_ast += usize::from(r.attributes.declare_target);
        in_ast += count_directives(&r.body);
    }
    assert_eq!(n_directives, in_ast);
}

fn count_directives(b: &Block) -> usize {
    let mut n = 0;
    for s in b {
        n += match s {
            // region nodes account for their begin and end directives
            Stmt::Target { body, .. } => 2 + count_directives(body),
            Stmt::Master { body, .. } | Stmt::Single { body, .. } => 2 + count_directives(body),
            Stmt::Barrier { .. } | Stmt::CriticalEnter { .. } | Stmt::CriticalExit { .. } => 1,
            Stmt::Do { body, .. } => count_directives(body),
            Stmt::If { then_body, else_body, .. } => {
                count_directives(then_body)
                    + else_body.as_ref().map(|b| count_directives(b)).unwrap_or(0)
            }
            _ => 0,
        };
    }
    n
}

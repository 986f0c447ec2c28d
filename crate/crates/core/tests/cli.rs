mod common;

use std::fs;

use common::{msfcn, stderr, stdout};

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = msfcn(
            &["synth", "--n", "10", "--seed", "1", "--out", out],
            dir.path(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let mut names: Vec<_> = fs::read_dir(dir.path().join("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 41);
    for n in names {
        let a = fs::read(dir.path().join("a").join(&n)).unwrap();
        let b = fs::read(dir.path().join("b").join(&n)).unwrap();
        assert_eq!(a, b, "{n:?}");
    }
}

#[test]
fn describe_shows_nine_by_nine_bottleneck() {
    let o = msfcn(
        &["describe", "--config", "default"],
        std::path::Path::new("."),
    );
    assert!(o.status.success());
    let text = stdout(&o);
    let row = text.lines().find(|l| l.contains("(bottleneck)")).unwrap();
    assert!(row.contains("x256x9x9"), "{row}");
    assert!(text.contains("deconv x18 k36/g32"));
}

#[test]
fn gradcheck_prints_every_op_under_tolerance() {
    let o = msfcn(
        &["gradcheck", "--samples", "16", "--skip-model"],
        std::path::Path::new("."),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert!(rows.len() >= 10, "{text}");
    for row in rows {
        let err: f64 = row.split_whitespace().nth(1).unwrap().parse().unwrap();
        assert!(err < 1e-4, "{row}");
    }
}

#[test]
fn errors_are_single_machine_readable_lines() {
    let dir = tempfile::tempdir().unwrap();
    let o = msfcn(
        &["train", "--config", "missing.toml", "--out", "x"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: kind=io message="), "{err}");

    fs::write(dir.path().join("bad.toml"), "batch_size = 0\n").unwrap();
    let o = msfcn(&["train", "--config", "bad.toml", "--out", "x"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).starts_with("error: kind=config message="),
        "{}",
        stderr(&o)
    );

    let o = msfcn(&["ablate", "--suite", "nope", "--out", "x"], dir.path());
    assert!(
        stderr(&o).contains("kind=invalid_argument"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn usage_errors_exit_two() {
    let here = std::path::Path::new(".");
    for args in [&["frobnicate"][..], &["synth", "--bogus"][..], &[][..]] {
        let o = msfcn(args, here);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(stderr(&o).contains("Usage"), "{args:?}");
    }
}

#[test]
fn augment_keeps_case_and_multiplies_by_forty() {
    let dir = tempfile::tempdir().unwrap();
    assert!(msfcn(&["synth", "--n", "2", "--out", "s"], dir.path())
        .status
        .success());
    let o = msfcn(
        &["augment", "--in", "s/manifest.toml", "--out", "a"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let m = msfcn::data::read_manifest(&dir.path().join("a/manifest.toml")).unwrap();
    assert_eq!(m.entries.len(), 80);
    assert!(m
        .entries
        .iter()
        .all(|e| e.case.as_deref().is_some_and(|c| c.starts_with("phantom"))));
    let s = m.load(&m.entries[41]).unwrap();
    assert_eq!((s.sample.image.h, s.sample.image.w), (108, 108));
}

mod common;

use common::{golden_path, one_sample_model};
use poisoncert::encode::{emit, emit_to_string, parse, parse_str, Census, MiqcpModel};

#[test]
fn one_sample_model_matches_golden_file() {
    let text = emit_to_string(&one_sample_model());
    if std::env::var_os("POISONCERT_BLESS").is_some() {
        std::fs::write(golden_path(), &text).unwrap();
    }
    let golden = std::fs::read_to_string(golden_path()).unwrap();
    assert_eq!(text, golden);
}

#[test]
fn emit_parse_emit_is_byte_identical() {
    let m = one_sample_model();
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.lp");
    emit(&m, &p1).unwrap();
    let back = parse(&p1).unwrap();
    assert_eq!(back, m);
    let p2 = dir.path().join("b.lp");
    emit(&back, &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn empty_model_is_header_only() {
    let text = emit_to_string(&MiqcpModel::new());
    assert!(text.lines().all(|l| l.starts_with('\\')), "{text}");
    assert!(parse_str(&text).unwrap().is_empty());
}

#[test]
fn census_comments_match_the_model() {
    let m = one_sample_model();
    let text = emit_to_string(&m);
    let lines: Vec<String> = text
        .lines()
        .filter_map(|l| l.strip_prefix("\\ "))
        .filter(|l| l.starts_with("census"))
        .map(str::to_string)
        .collect();
    assert_eq!(lines, Census::of(&m).comment_lines());
}

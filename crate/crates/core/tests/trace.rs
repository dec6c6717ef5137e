//! Line-delimited trace files: concurrent appends, partial tails, versions.

use std::io::Write;

use uncertainty_loop::backend::ScriptedBackend;
use uncertainty_loop::orchestrator::QueryFailure;
use uncertainty_loop::scenarios::{self, AGI_QUERY};
use uncertainty_loop::trace::{
    parse_trace, read_trace, TraceEntry, TraceError, TraceLine, TraceWriter,
};
use uncertainty_loop::{run_query, LoopConfig, RunRecord};

fn record() -> RunRecord {
    let b = ScriptedBackend::new(scenarios::agi_2030()).unwrap();
    run_query(AGI_QUERY, &LoopConfig::default(), &b).unwrap()
}

fn failure() -> QueryFailure {
    QueryFailure {
        query: "q".into(),
        stage: "generation".into(),
        error: "upstream returned HTTP 500".into(),
        started_at: "t0".into(),
        finished_at: "t1".into(),
    }
}

#[test]
fn concurrent_appends_yield_whole_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.jsonl");
    let writer = TraceWriter::open(&path).unwrap();
    let rec = record();
    std::thread::scope(|s| {
        for t in 0..8 {
            let writer = &writer;
            let rec = &rec;
            s.spawn(move || {
                for i in 0..10 {
                    let line = if (t + i) % 5 == 0 {
                        TraceLine::from_result(Err(failure()))
                    } else {
                        TraceLine::from_result(Ok(rec.clone()))
                    };
                    writer.append(&line).unwrap();
                }
            });
        }
    });
    let contents = read_trace(&path).unwrap();
    assert_eq!(contents.lines.len(), 80);
    assert!(!contents.incomplete_tail);
    assert!(contents.runs().all(|r| *r == rec));
    let failures = contents
        .lines
        .iter()
        .filter(|l| matches!(l.entry, TraceEntry::Failure(_)))
        .count();
    assert_eq!(failures, 16);
}

#[test]
fn appends_to_an_existing_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.jsonl");
    let line = TraceLine::from_result(Ok(record()));
    TraceWriter::open(&path).unwrap().append(&line).unwrap();
    TraceWriter::open(&path).unwrap().append(&line).unwrap();
    let contents = read_trace(&path).unwrap();
    assert_eq!(contents.lines, vec![line.clone(), line]);
}

#[test]
fn interrupted_write_is_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.jsonl");
    let full = TraceLine::from_result(Ok(record())).to_line();
    let mut f = std::fs::File::create(&path).unwrap();
    f.write_all(full.as_bytes()).unwrap();
    // a crash halfway through the second record
    f.write_all(&full.as_bytes()[..full.len() / 2]).unwrap();
    drop(f);
    let contents = read_trace(&path).unwrap();
    assert_eq!(contents.lines.len(), 1);
    assert!(contents.incomplete_tail);

    // even a tail that happens to be valid JSON is not trusted without its newline
    let tail_is_json = format!("{full}{}", full.trim_end());
    let contents = parse_trace(&tail_is_json).unwrap();
    assert_eq!(contents.lines.len(), 1);
    assert!(contents.incomplete_tail);
}

#[test]
fn each_line_is_self_describing() {
    let line = TraceLine::from_result(Ok(record())).to_line();
    assert!(line.ends_with('\n'));
    assert_eq!(line.matches('\n').count(), 1);
    let v: serde_json::Value = serde_json::from_str(&line).unwrap();
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["kind"], "run");
    assert_eq!(v["decision"]["cause_class"], "multi_signal");
    assert_eq!(
        v["decision"]["fired"],
        serde_json::json!(["entropy", "count"])
    );
}

#[test]
fn bad_lines_are_reported() {
    let good = TraceLine::from_result(Err(failure())).to_line();
    let err = parse_trace(&format!("{good}not json\n{good}")).unwrap_err();
    assert!(matches!(err, TraceError::Parse { line: 2, .. }), "{err}");

    let future = good.replacen("\"schema_version\":1", "\"schema_version\":2", 1);
    assert!(matches!(
        parse_trace(&future),
        Err(TraceError::UnsupportedVersion { line: 1, found: 2 })
    ));
    let zero = good.replacen("\"schema_version\":1", "\"schema_version\":0", 1);
    assert!(matches!(
        parse_trace(&zero),
        Err(TraceError::UnsupportedVersion { .. })
    ));
    let blank = format!("{good}\n\n{good}");
    assert_eq!(parse_trace(&blank).unwrap().lines.len(), 2);
}

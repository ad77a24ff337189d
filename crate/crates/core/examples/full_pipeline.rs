//! Generates a labeled synthetic corpus, runs every stage on it and checks
//! the output against the labels.
//!
//! cargo run --release --example full_pipeline [-- <records>]

use itcurate::pipeline::synthetic::{generate, write_corpus, Label, SyntheticSpec};
use itcurate::pipeline::{explain_uid, render_report, render_trace, run_pipeline, PipelineConfig};

fn main() -> itcurate::Result<()> {
    let records = std::env::args().nth(1).map(|s| s.parse().expect("record count")).unwrap_or(10_000);
    let dir = tempfile::tempdir().expect("tempdir");
    let corpus = generate(&SyntheticSpec { records, ..Default::default() }, 0)?;
    write_corpus(&corpus, dir.path())?;

    let cfg = PipelineConfig::load(&dir.path().join("config.toml"))?;
    let out = run_pipeline(&cfg)?;
    print!("{}", render_report(&out.report));

    let leaked = corpus.violations().filter(|u| out.selection.contains(u)).count();
    let sentinels = corpus.with_label(Label::Sentinel).filter(|u| out.selection.contains(u)).count();
    println!(
        "\nviolations left: {leaked}; sentinels kept: {sentinels}/{}",
        corpus.with_label(Label::Sentinel).count()
    );

    let uid = corpus.with_label(Label::NonEnglish).next().expect("planted");
    print!("{}", render_trace(uid, &explain_uid(&out.output_dir, uid)?));
    Ok(())
}

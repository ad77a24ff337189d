//! Packs a weighted selection into shards so that copies of a sample never
//! share a shard, then validates and writes the plan.
//!
//! cargo run --example shard_packing

use itcurate::corpus::{SelectionSet, Uid};
use itcurate::shard::{pack_shards, validate_plan, write_plan, write_shard_manifests};
use itcurate::Error;

fn main() -> itcurate::Result<()> {
    let sel: SelectionSet = (1..=200u128).map(|i| (Uid(i), 1 + (i % 3) as u32)).collect();
    let plan = pack_shards(&sel, 50, 0)?;
    println!("{} copies in {} shards", plan.total(), plan.shard_count());
    for (i, s) in plan.assignments.iter().enumerate() {
        println!("  shard {i}: {} entries", s.len());
    }
    validate_plan(&plan, &sel).map_err(|v| Error::Invariant(format!("{} violations", v.len())))?;

    let dir = tempfile::tempdir().expect("tempdir");
    write_plan(&plan, &dir.path().join("plan.tsv"))?;
    write_shard_manifests(&plan, &dir.path().join("shards"))?;
    println!("{} manifest files", std::fs::read_dir(dir.path().join("shards")).unwrap().count());

    let mut heavy = SelectionSet::new("heavy");
    heavy.insert(Uid(1), 6)?;
    match pack_shards(&heavy, 3, 0) {
        Err(e) => println!("six copies into two shards: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}

//! Generates a small attributed synthetic corpus, writes it to disk in the
//! WIDER box-list layout and shows what the difficulty filter keeps.
//!
//! ```text
//! cargo run --release --example synth_data -- /tmp/faces
//! ```

use std::collections::BTreeMap;
use std::path::PathBuf;

use facercnn::data::{
    difficulty, filter_records, gen_synthetic, parse_wider, save_dataset, serialize_wider, SynthConfig,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("facercnn_synth"));
    let cfg = SynthConfig {
        images: 40,
        attributes: true,
        ..SynthConfig::default()
    };
    let items = gen_synthetic(&cfg, 7)?;
    save_dataset(&out, &items)?;
    let records: Vec<_> = items.iter().map(|(r, _)| r.clone()).collect();
    let wider = serialize_wider(&records);
    std::fs::write(out.join("bbx_gt.txt"), &wider)?;

    let mut hist: BTreeMap<String, usize> = BTreeMap::new();
    for a in records.iter().flat_map(|r| &r.annotations) {
        let d = a.attributes.map_or(0.0, |t| difficulty(&t));
        *hist.entry(format!("{d:.1}")).or_default() += 1;
    }
    println!("difficulty histogram (faces): {hist:?}");

    let reparsed = parse_wider(&wider)?;
    let kept = filter_records(&reparsed);
    let faces = |rs: &[facercnn::data::ImageRecord]| rs.iter().map(|r| r.annotations.len()).sum::<usize>();
    println!(
        "{} images / {} faces written to {}; {} images / {} faces survive the difficulty filter",
        reparsed.len(),
        faces(&reparsed),
        out.display(),
        kept.len(),
        faces(&kept)
    );
    Ok(())
}

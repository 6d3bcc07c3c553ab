//! Anchor layouts: shapes per location, counts for a few input sizes and a
//! regression round trip.

use facercnn::anchors::{decode_delta, encode_delta, fmap_extent, generate_anchors, AnchorConfig};
use facercnn::geometry::BBox;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for (name, cfg) in [
        ("twelve", AnchorConfig::default()),
        ("nine", AnchorConfig::nine_anchor()),
    ] {
        println!("{name}-anchor layout, stride {}:", cfg.stride);
        for (w, h) in cfg.shapes() {
            println!("  {w:>8.2} x {h:>8.2}  area {:>8.0}", w * h);
        }
        for (iw, ih) in [(128, 128), (500, 375), (1024, 768)] {
            let (fw, fh) = (fmap_extent(iw, cfg.stride), fmap_extent(ih, cfg.stride));
            println!(
                "  {iw}x{ih}: {fw}x{fh} locations, {} anchors",
                generate_anchors(&cfg, fw, fh).len()
            );
        }
    }

    let anchor = BBox::from_center(72.0, 40.0, 64.0, 64.0)?;
    let face = BBox::new(50.0, 20.0, 90.0, 71.0)?;
    let d = encode_delta(&anchor, &face)?;
    println!("delta {:?} decodes to {:?}", d.to_array(), decode_delta(&anchor, &d)?);
    Ok(())
}

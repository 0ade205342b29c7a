//! Named presets, the `key = value` config format, and the config hash
//! that identifies a run.

use distiller::pipeline::{DistillerConfig, CONFIG_KEYS, PRESETS};

fn main() -> distiller::Result<()> {
    for name in PRESETS {
        let c = DistillerConfig::preset(name)?;
        println!("{name:<15} {}", c.hash());
    }

    let text = "\
preset = bert-emd
inter_loss.kind = MI_alpha
inter_loss.alpha = 0.5
aug.ops = RA, Mixup
train.epochs = 4
";
    let c = DistillerConfig::parse(text)?;
    println!("\n{}", c.to_text());
    assert_eq!(DistillerConfig::parse(&c.to_text())?, c);

    match DistillerConfig::parse("inter_loss.kind = MI_alpha\ninter_loss.alpha = 2\n") {
        Err(e) => println!("rejected: {e}"),
        Ok(_) => unreachable!(),
    }

    println!("\nrecognised keys:");
    for (k, doc) in CONFIG_KEYS {
        println!("  {k:<22} {doc}");
    }
    Ok(())
}

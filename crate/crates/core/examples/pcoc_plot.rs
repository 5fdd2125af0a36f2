//! Per-domain calibration of STAR(PN) and Base(BN), written as an SVG.
//!
//!     cargo run --release --example pcoc_plot -- out=pcoc.svg

use star_ctr::eval::pcoc_svg;
use star_ctr::experiment::{evaluate, generate_split, train, ExperimentConfig};
use star_ctr::model::{ModelKind, NormKind};

fn main() -> star_ctr::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (out, overrides): (Vec<_>, Vec<_>) = args.into_iter().partition(|a| a.starts_with("out="));
    let path = out
        .first()
        .map(|a| a["out=".len()..].to_string())
        .unwrap_or_else(|| "pcoc.svg".into());
    let base = ExperimentConfig::from_overrides(overrides)?;
    let split = generate_split(&base)?;

    let mut series = Vec::new();
    for (name, model, norm) in [
        ("STAR(PN)", ModelKind::Star, NormKind::Partitioned),
        ("Base(BN)", ModelKind::Base, NormKind::Batch),
    ] {
        let config = ExperimentConfig { model, norm, ..base.clone() };
        let (trained, _) = train(&config, &split.train, std::io::sink())?;
        let report = evaluate(&trained, &split.test)?;
        let pcoc = report.pcoc_map();
        println!(
            "{name}: PCOC std {:.4}, per domain {}",
            report.pcoc_std,
            pcoc.iter().map(|(p, v)| format!("{p}:{v:.3}")).collect::<Vec<_>>().join(" ")
        );
        series.push((name, pcoc));
    }
    std::fs::write(&path, pcoc_svg(&series))?;
    println!("wrote {path}");
    Ok(())
}

//! `etta flops`: analytic per-layer multiply-accumulate accounting for the
//! configured model and merge schedule, printed as a table and saved as JSON.

use etta::flops::flops_report;
use etta::Result;

use crate::config::RunConfig;

pub fn run(config: &RunConfig) -> Result<()> {
    let report = flops_report(&config.model, config.tta.r)?;

    println!(
        "model: {}px / patch {} / dim {} / {} layers / {} classes",
        config.model.image_size,
        config.model.patch_size,
        config.model.hidden_dim,
        config.model.num_layers,
        config.model.num_classes
    );
    println!("merge schedule: r = {} per layer", report.r);
    println!();
    println!(
        "{:>5} {:>6} {:>6} {:>14} {:>14} {:>14} {:>14} {:>14}",
        "layer", "in", "out", "qkv", "scores", "weighted", "out_proj", "ffn"
    );
    for (l, layer) in report.layers.iter().enumerate() {
        println!(
            "{:>5} {:>6} {:>6} {:>14} {:>14} {:>14} {:>14} {:>14}",
            l,
            layer.tokens_in,
            layer.tokens_out,
            layer.qkv,
            layer.scores,
            layer.weighted_sum,
            layer.out_proj,
            layer.ffn
        );
    }
    println!();
    println!("patch embed: {:>14} MACs", report.patch_embed);
    println!("class head:  {:>14} MACs", report.head);
    println!(
        "total: {} MACs ({:.4} GMACs, {:.4} GFLOPs at 2 FLOPs/MAC)",
        report.total_macs,
        report.total_gmacs(),
        2.0 * report.total_gmacs()
    );
    println!(
        "baseline (r = 0): {} MACs ({:.4} GMACs)",
        report.baseline_macs,
        report.baseline_gmacs()
    );
    println!("ratio vs baseline: {:.6}", report.ratio);

    let out = &config.paths.out_dir;
    std::fs::create_dir_all(out)?;
    let path = out.join("flops.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    config.write_resolved(out, "flops")?;
    println!("report written to {}", path.display());
    Ok(())
}

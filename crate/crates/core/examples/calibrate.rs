//! Reruns the width-schedule search and the kernel sweep, printing
//! markdown tables (`cargo run --example calibrate`).

use dcsau_core::analysis::{calibrate, count_flops, count_params, reference_cost};
use dcsau_core::{ModelConfig, Variant};

fn main() -> dcsau_core::Result<()> {
    let families = [
        ("plain", [Variant::Unet, Variant::UnetPfc]),
        ("split-attention", [Variant::UnetCsa, Variant::Dcsau]),
    ];
    for (name, variants) in families {
        println!("### {name} family\n");
        println!("| rank | widths | objective | variant | params | target | GMACs | target |");
        println!("|---|---|---|---|---|---|---|---|");
        for (rank, c) in calibrate(&variants, 5).iter().enumerate() {
            for fit in &c.fits {
                let (tp, tg) = reference_cost(fit.variant);
                println!(
                    "| {} | {:?} | {:.6} | {} | {:.3}M ({:+.2}%) | {:.2}M | {:.2} ({:+.2}%) | {:.2} |",
                    rank + 1,
                    c.widths,
                    c.objective,
                    fit.variant,
                    fit.params as f64 / 1e6,
                    100.0 * fit.params_error,
                    tp / 1e6,
                    fit.gmacs,
                    100.0 * fit.gmacs_error,
                    tg
                );
            }
        }
        println!();
    }
    println!("### PFC kernel sweep (dcsau, 3x256x256)\n");
    println!("| K | params | GMACs |");
    println!("|---|---|---|");
    for k in [3, 5, 7, 9] {
        let config = ModelConfig::new(Variant::Dcsau).with_kernel(k);
        let macs = count_flops(&config, 256, 256)?;
        println!("| {k} | {} | {:.4} |", count_params(&config), macs as f64 / 1e9);
    }
    Ok(())
}

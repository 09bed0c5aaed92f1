//! Generate every synthetic scenario and write one to CSV.
//!
//! `cargo run --release --example synthetic_data -- [out.csv]`

use cdcit::synthetic::{generate, Hypothesis, ModelId, Scenario};

fn main() -> cdcit::Result<()> {
    for model in ModelId::ALL {
        for hypothesis in [Hypothesis::H0, Hypothesis::H1] {
            if model.is_sampler_model() && hypothesis == Hypothesis::H1 {
                continue;
            }
            // The Gaussian oracle's dependence is set by rho alone.
            let rho = if hypothesis == Hypothesis::H1 { 0.5 } else { 0.0 };
            let scenario = Scenario::new(model, hypothesis, 10).with_rho(rho);
            let g = generate(&scenario, 200, 0)?;
            println!(
                "{:<16} {:?}: d_x {} d_y {} d_z {}  functions {:?}  cmi {:?}",
                model.name(),
                hypothesis,
                g.data.d_x(),
                g.data.d_y(),
                g.data.d_z(),
                g.scenario.functions,
                g.analytic_cmi
            );
        }
    }
    let out = std::env::args().nth(1).unwrap_or_else(|| "mixed_h1.csv".into());
    generate(&Scenario::new(ModelId::Mixed, Hypothesis::H1, 20), 500, 1)?
        .data
        .write_csv(&out)?;
    println!("wrote {out}");
    Ok(())
}

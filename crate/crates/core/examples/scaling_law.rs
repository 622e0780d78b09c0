//! Evaluates the two-stage excess-risk bound over a compute grid, then fits the
//! segmented law back to a noisy copy of the curve.

use ntklab::scaling_law::{
    fit_two_stage, lambert_w0, stage_bounds, stage_threshold, BudgetTriple, StageParams,
};
use rand::Rng;

fn main() -> ntklab::Result<()> {
    let p = StageParams::new(1.0, 4.0, 2.0);
    let data_size = 10.0;
    let threshold = stage_threshold(data_size, p.seq_len, p.dim, p.xi)?;
    println!("W(1) = {:.10}; stage threshold at Nd = {data_size}: C = {threshold:.4e}", lambert_w0(1.0)?);

    let mut curve = Vec::new();
    for i in 0..28 {
        let c = 1e3 * 10f64.powf(i as f64 / 3.0);
        let b = stage_bounds(&BudgetTriple::new(1.0, data_size, c / data_size)?, &p)?;
        if i % 3 == 0 {
            println!("C = {c:>9.3e}  stage {:>2}  bound {:.5e}  optimal Nd {:.3}", b.stage.label(), b.bound, b.optimal_data_size);
        }
        curve.push((c, b.bound));
    }

    let mut rng = ntklab::rng::seeded(9);
    let stage_two: Vec<(f64, f64)> = (0..20)
        .map(|i| {
            let c = 10f64.powf(8.0 + i as f64 * 0.2);
            (c, c.powf(-1.0 / 6.0) * (1.0 + 0.05 * (rng.random::<f64>() * 2.0 - 1.0)))
        })
        .collect();
    let fit = fit_two_stage(&stage_two)?;
    println!("\nnoisy power law: fitted exponent {:.4} (true -1/6 = {:.4})", fit.power_exp.unwrap(), -1.0 / 6.0);

    let fit = fit_two_stage(&curve)?;
    println!("bound curve: knee near C = {:.3e}, split after {} points", fit.knee_c.unwrap_or(f64::NAN), fit.split);
    Ok(())
}

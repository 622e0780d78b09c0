//! Runtime audit of the norm, perturbation and lazy-training bounds.
//!
//! Every record is a literal inequality between a measured scalar and a
//! reference scaled by a slack factor. Upper checks pass when
//! `measured <= slack * reference`, lower checks when
//! `measured >= reference / slack`.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data_synth::SampleSet;
use crate::error::{Error, Result};
use crate::grad::{gradient, Engine};
use crate::kernel::{features, kernels, lambda_min, KernelKind, MAX_KERNEL_SIZE};
use crate::model::{b_factor, forward, init_model, loss, ForwardTrace, ModelState, DEFAULT_DELTA};
use crate::training::TrainLog;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    pub slack: f64,
    pub delta: f64,
    /// Reference radius for weight and `U` drift.
    pub radius: f64,
    /// Constant multiplying every order-of-magnitude reference.
    pub constant: f64,
    pub engine: Engine,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self { slack: 4.0, delta: DEFAULT_DELTA, radius: 1.0, constant: 1.0, engine: Engine::Exact }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Upper,
    Lower,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundCheck {
    pub id: String,
    pub measured: f64,
    pub reference: f64,
    pub slack_factor: f64,
    pub direction: Direction,
    pub pass: bool,
}

impl BoundCheck {
    fn new(id: &str, measured: f64, reference: f64, slack: f64, direction: Direction) -> Self {
        let pass = measured.is_finite()
            && match direction {
                Direction::Upper => measured <= slack * reference,
                Direction::Lower => measured >= reference / slack,
            };
        Self { id: id.to_string(), measured, reference, slack_factor: slack, direction, pass }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub records: Vec<BoundCheck>,
    /// Checks that could not be evaluated on this input, with the reason.
    pub skipped: Vec<(String, String)>,
}

impl BoundReport {
    pub fn all_pass(&self) -> bool {
        self.records.iter().all(|r| r.pass)
    }

    pub fn pass_count(&self) -> usize {
        self.records.iter().filter(|r| r.pass).count()
    }

    pub fn get(&self, id: &str) -> Option<&BoundCheck> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.records.iter().filter(|r| !r.pass).map(|r| r.id.as_str()).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            let op = match r.direction {
                Direction::Upper => "<=",
                Direction::Lower => ">=",
            };
            let _ = writeln!(
                s,
                "{:<16} {:>12.5e} {op} {:>12.5e} (slack {}) {}",
                r.id,
                r.measured,
                r.reference,
                r.slack_factor,
                if r.pass { "pass" } else { "FAIL" }
            );
        }
        for (id, why) in &self.skipped {
            let _ = writeln!(s, "{id:<16} skipped: {why}");
        }
        let _ = writeln!(s, "{}/{} checks pass", self.pass_count(), self.records.len());
        s
    }
}

/// Optional context for the audit.
#[derive(Debug, Clone, Copy, Default)]
pub struct AuditContext<'a> {
    /// Parameters at `t = 0`; regenerated from the config's seed when absent.
    pub initial: Option<&'a ModelState>,
    /// Training log whose recorded radii join the measured drift.
    pub log: Option<&'a TrainLog>,
}

fn max_col_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.norm()).fold(0.0, f64::max)
}

fn fold_max(it: impl Iterator<Item = f64>) -> f64 {
    it.fold(0.0, f64::max)
}

pub fn audit(
    state: &ModelState,
    trace: &ForwardTrace,
    ds: &SampleSet,
    ctx: AuditContext<'_>,
    cfg: &DiagnosticsConfig,
) -> Result<BoundReport> {
    if trace.state_checksum != state.checksum() {
        return Err(Error::StaleTrace);
    }
    let c = &state.config;
    let (n_layers, m, d, l) = (c.n_layers, c.width, c.dim, c.seq_len);
    let regenerated;
    let initial = match ctx.initial {
        Some(s) => s,
        None => {
            regenerated = init_model(c);
            &regenerated
        }
    };
    let trace0 = forward(initial, ds)?;
    let b = b_factor(l, m, d, cfg.delta);
    let k = cfg.constant;
    let slack = cfg.slack;
    let sqrt_d = (d as f64).sqrt();
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    let mut push = |id: &str, measured: f64, reference: f64, s: f64, dir: Direction| {
        records.push(BoundCheck::new(id, measured, reference, s, dir));
    };

    // Basic bounds.
    push("G1-Part1", fold_max(initial.layers.iter().map(|p| max_col_norm(&p.w))), k * sqrt_d * b, slack, Direction::Upper);
    push("G1-Part2", fold_max(initial.layers.iter().map(|p| p.u.norm())), k * d as f64 * b, slack, Direction::Upper);
    push("G1-Part3", fold_max(state.layers.iter().map(|p| max_col_norm(&p.w))), k * sqrt_d * b, slack, Direction::Upper);
    push("G1-Part4", fold_max(state.layers.iter().map(|p| p.u.norm())), k * d as f64 * b, slack, Direction::Upper);

    let row_norms = || {
        trace
            .samples
            .iter()
            .flat_map(|s| s.hidden.iter())
            .flat_map(|h| h.row_iter().map(|r| r.norm()).collect::<Vec<_>>())
    };
    push("G1-Part5-max", fold_max(row_norms()), 2.0, 1.0, Direction::Upper);
    push("G1-Part5-min", row_norms().fold(f64::INFINITY, f64::min), 0.5, 1.0, Direction::Lower);

    let mut logits_max: f64 = 0.0;
    let mut sigma_min = f64::INFINITY;
    for s in &trace.samples {
        for kk in 0..n_layers {
            let lam = &s.hidden[kk];
            let logits = lam * &state.layers[kk].u * lam.transpose();
            for r in 0..l {
                for col in 0..=r {
                    logits_max = logits_max.max(logits[(r, col)].abs());
                    sigma_min = sigma_min.min(s.attn[kk][(r, col)]);
                }
            }
        }
    }
    push("G1-Part6", logits_max, k * d as f64 * b, slack, Direction::Upper);
    push("G1-Part8", sigma_min, (-k * d as f64 * b).exp() / l as f64, slack, Direction::Lower);

    // Perturbation bounds.
    let w_drift = fold_max(initial.layers.iter().zip(&state.layers).map(|(a, b)| max_col_norm(&(&b.w - &a.w))));
    let u_drift = fold_max(initial.layers.iter().zip(&state.layers).map(|(a, b)| (&b.u - &a.u).norm()));
    push("G1-Part9", w_drift, cfg.radius, slack, Direction::Upper);
    push("G1-Part10", u_drift, cfg.radius, slack, Direction::Upper);
    let mut r_meas = w_drift.max(u_drift);
    if let Some(log) = ctx.log {
        r_meas = r_meas.max(log.max_w_radius()).max(log.max_u_radius());
    }
    let mut lam_drift: f64 = 0.0;
    let mut sig_drift: f64 = 0.0;
    let mut o_drift: f64 = 0.0;
    for (s, s0) in trace.samples.iter().zip(&trace0.samples) {
        for kk in 0..n_layers {
            let dl = &s.hidden[kk + 1] - &s0.hidden[kk + 1];
            lam_drift = lam_drift.max(fold_max(dl.row_iter().map(|r| r.norm())));
            let ds_ = &s.attn[kk] - &s0.attn[kk];
            sig_drift = sig_drift.max(fold_max(ds_.row_iter().map(|r| r.norm())));
            let d_o = &s.attn_out[kk] - &s0.attn_out[kk];
            o_drift = o_drift.max(fold_max(d_o.row_iter().map(|r| r.norm())));
        }
    }
    let sqrt_l = (l as f64).sqrt();
    push("G1-Part11", lam_drift, k * r_meas, slack, Direction::Upper);
    push("G1-Part12", sig_drift, k * sqrt_l * r_meas, slack, Direction::Upper);
    push("G1-Part13", o_drift, k * sqrt_l * r_meas, slack, Direction::Upper);

    // Gradient and function norms.
    let cur_loss = loss(trace, ds);
    push("G1-Part14", cur_loss, k * (l * d) as f64, slack, Direction::Upper);
    let eps2 = c.epsilon * c.epsilon;
    if eps2 > 0.0 && cur_loss > 0.0 {
        let g = gradient(cfg.engine, state, trace, ds)?;
        let ratio = g.dmu.iter().map(|x| x.norm_squared()).sum::<f64>() / (eps2 * cur_loss);
        let centre = 4.0 * n_layers as f64 / ds.n() as f64;
        push("G1-Part15-max", ratio, centre, slack, Direction::Upper);
        push("G1-Part15-min", ratio, centre, slack, Direction::Lower);
    } else {
        skipped.push(("G1-Part15".to_string(), "zero output scale or zero loss".to_string()));
    }
    let fv = features(state, trace)?;
    let gamma_max = fold_max(fv.layers.iter().flat_map(|lf| (0..lf.positions()).map(|p| lf.gamma(p).norm())));
    push("G1-Part16", gamma_max, k / (m as f64).sqrt(), slack, Direction::Upper);

    // Lazy-training events.
    if trace.positions() <= MAX_KERNEL_SIZE {
        let h0 = kernels(initial, ds, KernelKind::Full)?;
        let ht = kernels(state, ds, KernelKind::Full)?;
        let mut worst: Option<(f64, f64)> = None;
        for (a, b) in h0.iter().zip(&ht) {
            let (l0, lt) = (lambda_min(a)?, lambda_min(b)?);
            if worst.is_none_or(|(w0, wt)| lt - l0 / 2.0 < wt - w0 / 2.0) {
                worst = Some((l0, lt));
            }
        }
        let (l0, lt) = worst.expect("at least one block");
        push("D-lambda-half", lt, l0 / 2.0, 1.0, Direction::Lower);

        let hp0 = kernels(initial, ds, KernelKind::WOnly)?;
        let lam_w = hp0.iter().map(lambda_min).collect::<Result<Vec<_>>>()?.into_iter().fold(f64::INFINITY, f64::min);
        let lambda = lam_w / c.omega;
        if lambda > 0.0 && c.omega > 0.0 {
            let reference = k / ((m as f64).sqrt() * c.omega * lambda * n_layers as f64);
            push("D-lazy", w_drift, reference, slack, Direction::Upper);
        } else {
            skipped.push(("D-lazy".to_string(), "initial W-kernel is singular".to_string()));
        }
    } else {
        skipped.push(("D-lambda-half".to_string(), format!("kernel size exceeds {MAX_KERNEL_SIZE}")));
        skipped.push(("D-lazy".to_string(), format!("kernel size exceeds {MAX_KERNEL_SIZE}")));
    }
    Ok(BoundReport { records, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_synth::{generate_dataset, NoiseModel, TeacherSpec};
    use crate::model::ModelConfig;

    fn setup(cfg: ModelConfig, n: usize) -> (ModelState, SampleSet) {
        let teacher = TeacherSpec::new(ModelConfig::new(1, 16, cfg.dim, cfg.seq_len).with_omega(0.5), 5);
        let ds = generate_dataset(&teacher, &NoiseModel::truncated_gaussian(0.1), n, cfg.seq_len, cfg.dim, 6).unwrap();
        (init_model(&cfg), ds)
    }

    fn good() -> (ModelState, SampleSet) {
        setup(ModelConfig::new(2, 64, 4, 4).with_seed(11), 4)
    }

    fn run(s: &ModelState, ds: &SampleSet, initial: Option<&ModelState>) -> BoundReport {
        let tr = forward(s, ds).unwrap();
        audit(s, &tr, ds, AuditContext { initial, log: None }, &DiagnosticsConfig::default()).unwrap()
    }

    fn fails(report: &BoundReport, id: &str) -> bool {
        !report.get(id).unwrap_or_else(|| panic!("{id} missing")).pass
    }

    #[test]
    fn fresh_good_properties_init_passes() {
        let (s, ds) = good();
        let r = run(&s, &ds, None);
        assert!(r.all_pass(), "{}", r.to_text());
        assert!(r.skipped.is_empty());
        assert_eq!(r.records.len(), 19);
    }

    #[test]
    fn silent_model_loss_is_target_energy() {
        let (s, ds) = setup(ModelConfig::new(1, 16, 3, 3).with_epsilon(0.0), 3);
        let r = run(&s, &ds, None);
        let want = ds.targets().iter().map(|y| y.norm_squared()).sum::<f64>() / 3.0;
        assert!((r.get("G1-Part14").unwrap().measured - want).abs() < 1e-14);
        assert!(r.get("G1-Part15-max").is_none());
    }

    #[test]
    fn stale_trace_is_rejected() {
        let (s, ds) = good();
        let tr = forward(&s, &ds).unwrap();
        let mut moved = s.clone();
        moved.layers[0].w[(0, 0)] += 1.0;
        let err = audit(&moved, &tr, &ds, AuditContext::default(), &DiagnosticsConfig::default());
        assert!(matches!(err, Err(Error::StaleTrace)));
    }

    #[test]
    fn inflated_token_rows_fail_part5() {
        let (s, ds) = good();
        let mut tr = forward(&s, &ds).unwrap();
        for smp in &mut tr.samples {
            for h in &mut smp.hidden {
                *h *= 10.0;
            }
        }
        let r = audit(&s, &tr, &ds, AuditContext::default(), &DiagnosticsConfig::default()).unwrap();
        assert!(fails(&r, "G1-Part5-max"));
        for smp in &mut tr.samples {
            for h in &mut smp.hidden {
                *h *= 0.01;
            }
        }
        let r = audit(&s, &tr, &ds, AuditContext::default(), &DiagnosticsConfig::default()).unwrap();
        assert!(fails(&r, "G1-Part5-min"));
    }

    #[test]
    fn inflated_initial_weights_fail_parts_1_and_2() {
        let (s, ds) = good();
        let mut init = s.clone();
        init.layers[1].w *= 100.0;
        init.layers[0].u *= 100.0;
        let r = run(&s, &ds, Some(&init));
        assert!(fails(&r, "G1-Part1") && fails(&r, "G1-Part2"));
    }

    #[test]
    fn inflated_current_weights_fail_parts_3_4_6_8() {
        let (mut s, ds) = good();
        s.layers[0].w *= 100.0;
        s.layers[0].u *= 1e4;
        let r = run(&s, &ds, Some(&good().0));
        for id in ["G1-Part3", "G1-Part4", "G1-Part6", "G1-Part8"] {
            assert!(fails(&r, id), "{id}\n{}", r.to_text());
        }
    }

    #[test]
    fn large_drift_fails_parts_9_10_and_lazy() {
        let (s, ds) = setup(ModelConfig::new(2, 64, 4, 4).with_omega(1.0).with_seed(11), 4);
        let mut moved = s.clone();
        moved.layers[0].w.add_scalar_mut(100.0);
        moved.layers[1].u.add_scalar_mut(10.0);
        let r = run(&moved, &ds, Some(&s));
        for id in ["G1-Part9", "G1-Part10", "D-lazy"] {
            assert!(fails(&r, id), "{id}\n{}", r.to_text());
        }
    }

    #[test]
    fn changed_frozen_readout_fails_parts_11_to_13() {
        let (s, ds) = setup(ModelConfig::new(2, 16, 3, 3).with_omega(1.0).with_seed(4), 3);
        let mut init = s.clone();
        init.layers[0].a *= -3.0;
        let r = run(&s, &ds, Some(&init));
        for id in ["G1-Part11", "G1-Part12", "G1-Part13"] {
            assert!(fails(&r, id), "{id}\n{}", r.to_text());
        }
    }

    #[test]
    fn huge_targets_fail_part14() {
        let (s, ds) = good();
        let big = ds.with_targets(ds.targets().iter().map(|y| y.add_scalar(100.0)).collect()).unwrap();
        assert!(fails(&run(&s, &big, None), "G1-Part14"));
    }

    #[test]
    fn amplified_lower_adjoints_fail_part15() {
        let (s, ds) = setup(ModelConfig::new(3, 16, 3, 3).with_omega(50.0).with_seed(2), 3);
        assert!(fails(&run(&s, &ds, None), "G1-Part15-max"));
    }

    /// Blocks with `U = 0` and paired units `(w, a)`, `(-w, -a)` compute
    /// `μ = -0.9 σΛ`, so each block maps adjoints through `I - 0.9 σ`, which
    /// contracts. The factor stays below 1 so no token row lands on a kink.
    fn contracting_stack(n_layers: usize, d: usize, l: usize) -> ModelState {
        let m = 2 * d;
        let mut s = init_model(&ModelConfig::new(n_layers, m, d, l).with_omega(1.0).with_seed(1));
        let eye = DMatrix::<f64>::identity(d, d);
        let root_m = 0.9 * (m as f64).sqrt();
        for layer in &mut s.layers {
            layer.u.fill(0.0);
            layer.w.view_mut((0, 0), (d, d)).copy_from(&eye);
            layer.w.view_mut((0, d), (d, d)).copy_from(&(-&eye));
            layer.a.view_mut((0, 0), (d, d)).copy_from(&(-&eye * root_m));
            layer.a.view_mut((d, 0), (d, d)).copy_from(&(&eye * root_m));
        }
        s
    }

    #[test]
    fn contracting_blocks_fail_part15_min() {
        let s = contracting_stack(8, 3, 2);
        let (_, ds) = setup(s.config.clone(), 3);
        let r = run(&s, &ds, Some(&s));
        assert!(fails(&r, "G1-Part15-min"), "{}", r.to_text());
    }

    #[test]
    fn wide_output_scale_fails_part16() {
        let (s, ds) = setup(ModelConfig::new(1, 16, 3, 3).with_omega(30.0).with_seed(2), 3);
        assert!(fails(&run(&s, &ds, None), "G1-Part16"));
    }

    #[test]
    fn collapsed_kernel_fails_lambda_half() {
        let (s, ds) = good();
        let mut init = s.clone();
        init.config.omega *= 10.0;
        assert!(fails(&run(&s, &ds, Some(&init)), "D-lambda-half"));
    }
}

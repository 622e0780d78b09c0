use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::json;

use super::config::{tags, ExperimentConfig};
use super::manifest::{create_run_dir, RunManifest, RunRecorder, CONFIG_FILE};
use super::table::{num, read_columns, Table};
use crate::data_synth::{generate_dataset, SampleSet};
use crate::diagnostics::{audit, AuditContext};
use crate::error::{Error, Result};
use crate::grad::{fd_battery, fd_max_error, grad_divergence_report, grad_exact, FdSettings, GradientSet};
use crate::kernel::{kernels, lambda_min, KernelKind, MAX_KERNEL_SIZE, PSD_TOL};
use crate::linalg::max_eigenvalue;
use crate::model::{forward, init_model, ModelState};
use crate::ntk_regression::{centred_targets, fit_targets, predict, student_discrepancy};
use crate::persist::{save_dataset, save_model};
use crate::scaling_law::{
    fit_two_stage, model_size, optimal_data_size, stage_bounds, stage_one_bound, stage_two_bound, BudgetTriple,
};
use crate::training::{estimate_risk, fit_convergence, predicted_rate, suggest_eta, train_into, TrainLog};

/// What a finished command reports back to the caller.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub dir: PathBuf,
    /// False when the command's own checks failed.
    pub passed: bool,
    pub summary: String,
    pub manifest: RunManifest,
}

fn dataset(cfg: &ExperimentConfig, n: usize) -> Result<SampleSet> {
    let m = &cfg.model;
    generate_dataset(&cfg.teacher_spec(), &cfg.noise_model(), n, m.seq_len, m.dim, cfg.seed_for(tags::DATA, 0))
}

fn fresh_dir(dir: &Path, command: &str, cfg: &ExperimentConfig) -> Result<RunRecorder> {
    create_run_dir(dir)?;
    let mut rec = RunRecorder::new(dir, command);
    rec.write(CONFIG_FILE, cfg.to_toml())?;
    Ok(rec)
}

fn scale_gradients(g: &mut GradientSet, s: f64) {
    for l in &mut g.layers {
        l.du *= s;
        l.dw *= s;
    }
}

fn kernel_fits(cfg: &ExperimentConfig, n: usize) -> bool {
    n * cfg.model.seq_len <= MAX_KERNEL_SIZE
}

fn lambda_mins(state: &ModelState, ds: &SampleSet) -> Result<Vec<f64>> {
    kernels(state, ds, KernelKind::Full)?.iter().map(lambda_min).collect()
}

pub fn grad_check(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let mut rec = fresh_dir(dir, "grad-check", cfg)?;
    let gc = &cfg.grad_check;
    let state = init_model(&cfg.model_config(cfg.model.width, 0));
    let ds = dataset(cfg, cfg.data.n)?;
    let trace = forward(&state, &ds)?;
    let mut analytic = grad_exact(&state, &trace, &ds)?;
    if let Some(s) = gc.corrupt_scale {
        scale_gradients(&mut analytic, s);
    }
    let settings = FdSettings {
        per_block: gc.coords_per_block,
        h: gc.h,
        kink_radius: gc.kink_radius,
        seed: cfg.seed_for(tags::COORDS, 0),
        ..FdSettings::default()
    };
    let records = fd_battery(&state, &ds, &analytic, &settings)?;
    let mut t = Table::new(
        "grad-check",
        &["layer", "block", "row", "col", "analytic", "finite_difference", "rel_error", "near_kink"],
    );
    for r in &records {
        t.push(vec![
            (r.coord.layer + 1).to_string(),
            format!("{:?}", r.coord.block),
            r.coord.row.to_string(),
            r.coord.col.to_string(),
            num(r.analytic),
            num(r.finite_difference),
            num(r.rel_error),
            r.near_kink.to_string(),
        ]);
    }
    rec.write("grad_check.csv", t.to_bytes())?;
    let report = grad_divergence_report(&state, &trace, &ds)?;
    rec.write("divergence.txt", report.to_text())?;

    let max_err = fd_max_error(&records);
    let excluded = records.iter().filter(|r| r.near_kink).count();
    let passed = max_err <= gc.tolerance && records.iter().all(|r| r.analytic.is_finite());
    rec.metric("max_rel_error", max_err);
    rec.metric("coordinates", records.len());
    rec.metric("kink_excluded", excluded);
    rec.metric("max_paper_discrepancy_W", report.max_discrepancy("W"));
    let summary = format!(
        "grad-check: {} coordinates ({excluded} near a kink), max relative error {max_err:.3e} (tolerance {:.1e}): {}",
        records.len(),
        gc.tolerance,
        if passed { "PASS" } else { "FAIL" }
    );
    let manifest = rec.finish(cfg, if passed { "ok" } else { "check-failed" })?;
    Ok(Outcome { dir: dir.to_path_buf(), passed, summary, manifest })
}

fn train_table(log: &TrainLog, n_layers: usize) -> Table {
    let mut header = vec!["step".to_string(), "t".into(), "loss".into()];
    for prefix in ["grad_norm", "w_radius", "u_radius"] {
        header.extend((1..=n_layers).map(|k| format!("{prefix}_{k}")));
    }
    let mut t = Table::with_header("train", header);
    for p in &log.probes {
        let mut row = vec![p.step.to_string(), num(p.t), num(p.loss)];
        for v in p.grad_norms.iter().chain(&p.w_radius).chain(&p.u_radius) {
            row.push(num(*v));
        }
        t.push(row);
    }
    t
}

fn audit_table(log: &TrainLog) -> Table {
    let mut t = Table::new(
        "kernel-audit",
        &["step", "t", "layer", "kind", "lambda_min", "lambda_min_initial", "frob_drift", "psd_ok", "half_event", "weyl_ok"],
    );
    for p in &log.probes {
        for a in &p.audits {
            t.push(vec![
                p.step.to_string(),
                num(p.t),
                (a.layer + 1).to_string(),
                a.kind.as_str().into(),
                num(a.lambda_min),
                num(a.lambda_min_initial),
                num(a.frob_drift),
                a.psd_ok.to_string(),
                a.half_event.to_string(),
                a.weyl_ok.to_string(),
            ]);
        }
    }
    t
}

/// Headline numbers of one training run, as needed by the sweep aggregate.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub final_loss: f64,
    pub horizon: f64,
    pub excess_risk: Option<f64>,
    pub stderr: Option<f64>,
    pub expected_risk: Option<f64>,
}

/// Writes a finished or partial training log.
fn write_log(rec: &mut RunRecorder, log: &TrainLog, n_layers: usize) -> Result<()> {
    rec.write("train.csv", train_table(log, n_layers).to_bytes())?;
    if log.probes.iter().any(|p| !p.audits.is_empty()) {
        rec.write("kernel_audit.csv", audit_table(log).to_bytes())?;
    }
    Ok(())
}

pub fn train(cfg: &ExperimentConfig, dir: &Path) -> Result<(Outcome, TrainSummary)> {
    let mut rec = fresh_dir(dir, "train", cfg)?;
    let mc = cfg.model_config(cfg.model.width, 0);
    let init = init_model(&mc);
    let ds = dataset(cfg, cfg.data.n)?;
    let base_eta = match cfg.train.eta {
        Some(e) => e,
        None => suggest_eta(&init, &ds)?,
    };
    let with_kernels = kernel_fits(cfg, ds.n());

    let mut tc = cfg.train_config(base_eta, None, 0);
    if !with_kernels {
        tc.audit_kernel = None;
    }
    let mut halvings = 0;
    let (out, log) = loop {
        let mut log = TrainLog { epsilon: mc.epsilon, probes: Vec::new() };
        match train_into(&init, &ds, &tc, &mut log) {
            Ok(out) => break (out, log),
            Err(Error::DivergenceDetected { .. }) if halvings < cfg.train.max_halvings => {
                tc.eta /= 2.0;
                halvings += 1;
            }
            Err(e @ Error::DivergenceDetected { .. }) => {
                write_log(&mut rec, &log, mc.n_layers)?;
                rec.metric("eta", tc.eta);
                rec.metric("halvings", halvings);
                rec.metric("error", e.to_string());
                rec.finish(cfg, "diverged")?;
                return Err(e);
            }
            Err(e) => return Err(e),
        }
    };
    write_log(&mut rec, &log, mc.n_layers)?;
    save_model(&out, &rec.path("model.bin"))?;
    rec.track("model.bin");
    save_dataset(&ds, &rec.path("dataset.bin"))?;
    rec.track("dataset.bin");

    let initial = log.initial_loss().unwrap_or(f64::NAN);
    let final_loss = log.final_loss().unwrap_or(f64::NAN);
    rec.metric("eta", tc.eta);
    rec.metric("halvings", halvings);
    rec.metric("horizon", tc.horizon);
    rec.metric("steps", tc.steps());
    rec.metric("initial_loss", initial);
    rec.metric("final_loss", final_loss);
    rec.metric("max_w_radius", log.max_w_radius());
    rec.metric("max_u_radius", log.max_u_radius());
    if with_kernels {
        rec.metric("lambda_min_start", lambda_mins(&init, &ds)?);
        rec.metric("lambda_min_end", lambda_mins(&out, &ds)?);
        rec.metric("predicted_rate", predicted_rate(&init, &ds)?);
        let trace = forward(&out, &ds)?;
        let ctx = AuditContext { initial: Some(&init), log: Some(&log) };
        let report = audit(&out, &trace, &ds, ctx, &cfg.diagnostics)?;
        rec.write("diagnostics.txt", report.to_text())?;
        rec.metric("diagnostics_pass", format!("{}/{}", report.pass_count(), report.records.len()));
    }
    if let Ok(fit) = fit_convergence(&log, None) {
        rec.metric("fitted_rate", json!({ "alpha_hat": fit.alpha_hat, "r2": fit.r2, "probes": fit.probes_used }));
    }
    let mut summary = TrainSummary { final_loss, horizon: tc.horizon, excess_risk: None, stderr: None, expected_risk: None };
    if cfg.risk.n_eval > 0 {
        let r = estimate_risk(&out, &cfg.teacher_spec(), &cfg.noise_model(), cfg.risk.n_eval, cfg.seed_for(tags::RISK, 0))?;
        rec.metric("risk", r);
        summary.excess_risk = Some(r.excess_risk);
        summary.stderr = Some(r.stderr);
        summary.expected_risk = Some(r.expected_risk);
    }
    let text = format!(
        "train: {} steps at eta {:.4e}, loss {initial:.6e} -> {final_loss:.6e}",
        tc.steps(),
        tc.eta
    );
    let manifest = rec.finish(cfg, "ok")?;
    Ok((Outcome { dir: dir.to_path_buf(), passed: true, summary: text, manifest }, summary))
}

fn axis<T: Clone>(name: &str, values: &Option<Vec<T>>, base: T) -> Result<Vec<T>> {
    match values {
        Some(v) if v.is_empty() => Err(Error::Config(format!("sweep.{name} is empty"))),
        Some(v) => Ok(v.clone()),
        None => Ok(vec![base]),
    }
}

pub fn scaling_sweep(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let widths = axis("width", &cfg.sweep.width, cfg.model.width)?;
    let ns = axis("n", &cfg.sweep.n, cfg.data.n)?;
    let horizons: Vec<Option<f64>> = match &cfg.sweep.horizon {
        Some(v) if v.is_empty() => return Err(Error::Config("sweep.horizon is empty".into())),
        Some(v) => v.iter().map(|&t| Some(t)).collect(),
        None => vec![cfg.train.horizon],
    };
    let mut cells = Vec::new();
    for &m in &widths {
        for &n in &ns {
            for &t in &horizons {
                let mut c = cfg.clone();
                c.model.width = m;
                c.data.n = n;
                c.train.horizon = t;
                c.sweep = Default::default();
                c.sweep.n_eval = cfg.sweep.n_eval;
                if cfg.sweep.n_eval > 0 {
                    c.risk.n_eval = cfg.sweep.n_eval;
                }
                c.validate()?;
                cells.push(c);
            }
        }
    }
    let mut rec = fresh_dir(dir, "scaling-sweep", cfg)?;
    let names: Vec<String> = cells
        .iter()
        .enumerate()
        .map(|(i, c)| format!("cell-{i:03}-m{}-n{}", c.model.width, c.data.n))
        .collect();
    let results: Vec<Result<(Outcome, TrainSummary)>> = cells
        .par_iter()
        .zip(&names)
        .map(|(c, name)| {
            let mut c = c.clone();
            c.out_dir = Some(dir.join(name));
            train(&c, &dir.join(name))
        })
        .collect();

    let mut agg = Table::new(
        "aggregate",
        &["cell", "width", "n", "horizon", "model_size", "compute", "status", "final_loss", "excess_risk", "stderr", "expected_risk"],
    );
    let mut curve = Vec::new();
    let mut failed = 0;
    for ((c, name), res) in cells.iter().zip(&names).zip(results) {
        let msize = model_size(c.model.n_layers as u64, c.model.width as u64, c.model.dim as u64) as f64;
        let opt = |x: Option<f64>| x.map(num).unwrap_or_default();
        let row = match res {
            Ok((outcome, s)) => {
                for f in outcome.manifest.files.keys() {
                    rec.track(&format!("{name}/{f}"));
                }
                rec.track(&format!("{name}/manifest.json"));
                let compute = msize * s.horizon * c.data.n as f64;
                if let Some(r) = s.excess_risk {
                    curve.push((compute, r));
                }
                vec![num(s.horizon), num(msize), num(compute), "ok".into(), num(s.final_loss), opt(s.excess_risk), opt(s.stderr), opt(s.expected_risk)]
            }
            Err(e) => {
                failed += 1;
                let status = match e {
                    Error::DivergenceDetected { .. } => "diverged".to_string(),
                    other => format!("error: {other}"),
                };
                vec![c.train.horizon.map(num).unwrap_or_default(), num(msize), String::new(), status, String::new(), String::new(), String::new(), String::new()]
            }
        };
        let mut full = vec![name.clone(), c.model.width.to_string(), c.data.n.to_string()];
        full.extend(row);
        agg.push(full);
    }
    rec.write("aggregate.csv", agg.to_bytes())?;
    let positive: Vec<(f64, f64)> = curve.iter().copied().filter(|&(c, r)| c > 0.0 && r > 0.0).collect();
    match fit_two_stage(&positive) {
        Ok(fit) => {
            rec.write("fit.csv", fit_table(&fit).to_bytes())?;
            rec.metric("fit", fit);
        }
        Err(e) => rec.metric("fit_skipped", e.to_string()),
    }
    rec.metric("cells", cells.len());
    rec.metric("failed_cells", failed);
    let summary = format!("scaling-sweep: {} cells, {failed} failed", cells.len());
    let manifest = rec.finish(cfg, if failed == 0 { "ok" } else { "partial" })?;
    Ok(Outcome { dir: dir.to_path_buf(), passed: true, summary, manifest })
}

fn fit_table(fit: &crate::scaling_law::FitResult) -> Table {
    let opt = |x: Option<f64>| x.map(num).unwrap_or_default();
    let mut t = Table::new("fit", &["exp_rate", "power_exp", "knee_c", "r2_exp", "r2_power", "split", "sse"]);
    t.push(vec![
        opt(fit.exp_rate),
        opt(fit.power_exp),
        opt(fit.knee_c),
        opt(fit.r2_exp),
        opt(fit.r2_power),
        fit.split.to_string(),
        num(fit.sse),
    ]);
    t
}

pub fn predict_cmd(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let grid = cfg.scaling.grid()?;
    let p = cfg.scaling.params();
    let nd = cfg.scaling.data_size;
    let mut t = Table::new(
        "predict",
        &["compute", "stage", "threshold", "bound", "optimal_data_size", "stage_one_bound", "stage_two_bound"],
    );
    let mut flips = 0;
    let mut last = None;
    let mut rows = Vec::new();
    for &c in &grid {
        let b = BudgetTriple::new(1.0, nd, c / nd).map_err(|e| Error::Config(e.to_string()))?;
        let sb = stage_bounds(&b, &p).map_err(|e| Error::Config(e.to_string()))?;
        if last.is_some_and(|s| s != sb.stage) {
            flips += 1;
        }
        last = Some(sb.stage);
        rows.push(vec![
            num(c),
            sb.stage.label().into(),
            num(sb.threshold),
            num(sb.bound),
            num(optimal_data_size(c, p.xi)?),
            num(stage_one_bound(c, nd, &p)),
            num(stage_two_bound(c, p.xi)?),
        ]);
    }
    let mut rec = fresh_dir(dir, "predict", cfg)?;
    for r in rows {
        t.push(r);
    }
    rec.write("predict.csv", t.to_bytes())?;
    rec.metric("points", grid.len());
    rec.metric("stage_changes", flips);
    let summary = format!("predict: {} compute values, stage changes {flips} time(s)", grid.len());
    let manifest = rec.finish(cfg, "ok")?;
    Ok(Outcome { dir: dir.to_path_buf(), passed: true, summary, manifest })
}

pub fn fit_cmd(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let input = cfg
        .fit
        .as_ref()
        .map(|f| f.input.clone())
        .ok_or_else(|| Error::Config("fit.input is required".into()))?;
    let curve = read_columns(&input, "compute", "risk").map_err(|e| Error::Config(e.to_string()))?;
    let fit = fit_two_stage(&curve).map_err(|e| Error::Config(e.to_string()))?;
    let mut rec = fresh_dir(dir, "fit", cfg)?;
    rec.write("fit.csv", fit_table(&fit).to_bytes())?;
    rec.metric("fit", fit);
    let summary = format!(
        "fit: {} points, exponential segment {} points, power exponent {}",
        curve.len(),
        fit.split,
        fit.power_exp.map_or("none".to_string(), |x| format!("{x:.6}"))
    );
    let manifest = rec.finish(cfg, "ok")?;
    Ok(Outcome { dir: dir.to_path_buf(), passed: true, summary, manifest })
}

pub fn kernel_audit(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let state = init_model(&cfg.model_config(cfg.model.width, 0));
    let ds = dataset(cfg, cfg.data.n)?;
    let mut t = Table::new("kernel-spectrum", &["layer", "kind", "size", "lambda_min", "lambda_max", "trace", "psd_ok"]);
    let mut all_psd = true;
    let mut mins = Vec::new();
    for kind in [KernelKind::Full, KernelKind::WOnly] {
        for k in kernels(&state, &ds, kind)? {
            let lmin = lambda_min(&k)?;
            let psd = lmin >= -PSD_TOL;
            all_psd &= psd;
            mins.push(json!({ "layer": k.layer + 1, "kind": kind.as_str(), "lambda_min": lmin }));
            t.push(vec![
                (k.layer + 1).to_string(),
                kind.as_str().into(),
                k.h.nrows().to_string(),
                num(lmin),
                num(max_eigenvalue(&k.h)?),
                num(k.h.trace()),
                psd.to_string(),
            ]);
        }
    }
    let mut rec = fresh_dir(dir, "kernel-audit", cfg)?;
    rec.write("kernel_spectrum.csv", t.to_bytes())?;
    rec.metric("lambda_min", mins);
    rec.metric("psd_ok", all_psd);
    let summary = format!("kernel-audit: {} kernels, all PSD: {all_psd}", t.len());
    let manifest = rec.finish(cfg, if all_psd { "ok" } else { "check-failed" })?;
    Ok(Outcome { dir: dir.to_path_buf(), passed: all_psd, summary, manifest })
}

pub fn ntk_regress(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let mc = cfg.model_config(cfg.model.width, 0);
    let init = init_model(&mc);
    let ds = dataset(cfg, cfg.data.n)?;
    let m = &cfg.model;
    let held = generate_dataset(
        &cfg.teacher_spec(),
        &cfg.noise_model(),
        cfg.ntk.n_eval,
        m.seq_len,
        m.dim,
        cfg.seed_for(tags::HELDOUT, 0),
    )?;
    let targets = centred_targets(&init, &ds)?;
    let p = fit_targets(ds.inputs(), &targets, mc.epsilon, cfg.ntk.layout)?;

    let student = if cfg.ntk.train_student {
        let eta = match cfg.train.eta {
            Some(e) => e,
            None => suggest_eta(&init, &ds)?,
        };
        let mut tc = cfg.train_config(eta, None, 0);
        tc.audit_kernel = None;
        let mut log = TrainLog { epsilon: mc.epsilon, probes: Vec::new() };
        Some((train_into(&init, &ds, &tc, &mut log)?, log))
    } else {
        None
    };

    let mut header = vec!["sample", "position", "component", "target", "ntk"];
    if student.is_some() {
        header.push("student");
    }
    let mut t = Table::new("ntk-predictions", &header);
    let (mut ntk_se, mut student_se) = (0.0, 0.0);
    for (i, x) in held.inputs().iter().enumerate() {
        let pred = predict(&p, x)?;
        let s_out = match &student {
            Some((s, _)) => Some(crate::model::forward_single(s, x.as_matrix())?),
            None => None,
        };
        let y = held.target(i);
        ntk_se += (&pred - y).norm_squared();
        if let Some(o) = &s_out {
            student_se += (o - y).norm_squared();
        }
        for pos in 0..m.seq_len {
            for j in 0..m.dim {
                let mut row = vec![i.to_string(), (pos + 1).to_string(), j.to_string(), num(y[(pos, j)]), num(pred[(pos, j)])];
                if let Some(o) = &s_out {
                    row.push(num(o[(pos, j)]));
                }
                t.push(row);
            }
        }
    }
    let mut rec = fresh_dir(dir, "ntk-regress", cfg)?;
    rec.write("ntk_predictions.csv", t.to_bytes())?;
    let n_held = held.n() as f64;
    rec.metric("layout", cfg.ntk.layout);
    rec.metric("gram_condition", p.grams.iter().map(|g| g.condition).fold(0.0, f64::max));
    rec.metric("gram_jitter", p.grams.iter().map(|g| g.jitter).fold(0.0, f64::max));
    rec.metric("ntk_heldout_risk", ntk_se / n_held);
    let mut summary = format!("ntk-regress: held-out risk {:.6e}", ntk_se / n_held);
    if let Some((s, log)) = &student {
        let disc = student_discrepancy(s, &init, &p, held.inputs())?;
        rec.metric("student_heldout_risk", student_se / n_held);
        rec.metric("student_final_loss", log.final_loss());
        rec.metric("student_discrepancy", disc);
        summary.push_str(&format!(", student discrepancy {disc:.4e}"));
    }
    let manifest = rec.finish(cfg, "ok")?;
    Ok(Outcome { dir: dir.to_path_buf(), passed: true, summary, manifest })
}

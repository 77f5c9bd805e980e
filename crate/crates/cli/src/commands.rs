//! The config-driven subcommands.

use noisepath::analytic::stationary_spectrum_scalar;
use noisepath::control::{eigenmode_floor, optimize_pulse_times, protection_report, write_report_csv};
use noisepath::dephasing::{attenuation_time_basis, coherence_curve, write_curve_csv};
use noisepath::eigenmodes::{bispectrum_from_correlation, decompose, truncation_bound};
use noisepath::gridops::{discretize_kernel, kernel_to_correlation, PADDING_TOLERANCE};
use noisepath::io::fmt_f64;
use noisepath::kernel::validate_kernel_spec;
use noisepath::markov::{chapman_kolmogorov_check, propagator, MAX_CONDITION};
use noisepath::modulation::control_free;
use noisepath::sampler::{
    factorize_covariance, factorize_precision, monte_carlo_coherence, sample_path_regularity, sample_paths,
    write_paths_csv, MAX_DUMPED_PATHS,
};
use noisepath::spectroscopy::{
    design_filter_bank_cw, design_filter_bank_eigen, design_filter_bank_tapered, fit_local_in_time,
    reconstruct_frequency, reconstruct_nonparametric, simulate_measurements, AmplitudePolicy, NoiseModel,
    ProbeLabel,
};
use noisepath::types::CHI_SLACK;
use noisepath::{CorrelationMatrix, Error, GeneralizedState, OptimizerOptions};
use serde_json::json;
use std::io::Write;

use crate::config::{Config, FactorChoice, ProbeConfig};
use crate::{CliError, Command, Context, Report};

fn missing(section: &str) -> CliError {
    CliError::Config(format!("{section}: required by this command"))
}

fn correlation(cfg: &Config) -> Result<CorrelationMatrix, CliError> {
    let k = discretize_kernel(&cfg.kernel()?, &cfg.grid()?)?;
    Ok(kernel_to_correlation(&k, cfg.boundary())?)
}

pub fn run(cmd: &Command, cfg: &Config, ctx: &Context) -> Result<Report, CliError> {
    match cmd {
        Command::Correlate => correlate(cfg, ctx),
        Command::Modes => modes(cfg, ctx),
        Command::Dephase => dephase(cfg, ctx),
        Command::Sample => sample(cfg, ctx),
        Command::Reconstruct => reconstruct(cfg, ctx),
        Command::Optimize => optimize(cfg, ctx),
        Command::Propagate => propagate(cfg, ctx),
        Command::Reproduce { .. } => unreachable!("reproduce takes no config"),
    }
}

fn correlate(cfg: &Config, ctx: &Context) -> Result<Report, CliError> {
    let grid = cfg.grid()?;
    let spec = cfg.kernel()?;
    let validation = validate_kernel_spec(&spec, &grid);
    if !validation.valid {
        return Err(CliError::Config(format!("kernel: {}", validation.messages.join("; "))));
    }
    let g = correlation(cfg)?;
    let meta = ctx.metadata("correlate", None, Some(grid), vec![("padding", PADDING_TOLERANCE)]);
    let mut report = Report::default();
    report.outputs.csv("correlation.csv", &meta, |w| g.write_csv(w));
    report.outputs.json(
        "correlation.json",
        &meta,
        json!({
            "boundary": g.boundary(),
            "dim": g.dim(),
            "padding": g.padding(),
            "min_kernel_eigenvalue": validation.min_eigenvalue,
            "messages": validation.messages,
        }),
    );
    Ok(report)
}

fn modes(cfg: &Config, ctx: &Context) -> Result<Report, CliError> {
    let opts = cfg.modes();
    let g = correlation(cfg)?;
    let dec = decompose(&g, opts.cutoff)?;
    let meta = ctx.metadata(
        "modes",
        None,
        Some(*g.grid()),
        vec![("padding", PADDING_TOLERANCE), ("cutoff", opts.cutoff)],
    );
    let mut report = Report::default();
    report.outputs.csv("eigenmodes.csv", &meta, |w| dec.write_csv(w));
    report
        .outputs
        .csv("mode_functions.csv", &meta, |w| dec.write_functions_csv(w, opts.functions));
    if opts.bispectrum {
        let b = bispectrum_from_correlation(&g);
        report.outputs.csv("bispectrum.csv", &meta, |w| b.write_csv(w));
    }
    report.outputs.json(
        "modes.json",
        &meta,
        json!({
            "modes": dec.len(),
            "s_max": dec.s_max(),
            "s_min": dec.s_min(),
            "dropped_count": dec.dropped_count,
            "dropped_weight": dec.dropped_weight,
            "truncation_bound": truncation_bound(&dec),
            "degenerate_groups": dec.degenerate_groups(),
        }),
    );
    Ok(report)
}

fn durations(cfg: &Config) -> Result<Vec<f64>, CliError> {
    let c = cfg.control_config()?;
    let (_, full) = cfg.window(c.t0, c.duration)?;
    let curve = cfg.curve.clone();
    if let Some(ds) = curve.as_ref().and_then(|c| c.durations.clone()) {
        if ds.is_empty() || ds.iter().any(|d| !(*d > 0.0 && *d <= full)) {
            return Err(CliError::Config(format!(
                "curve.durations: each must lie in (0, {full}]"
            )));
        }
        return Ok(ds);
    }
    let points = curve.map_or(50, |c| c.points);
    if points == 0 {
        return Err(CliError::Config("curve.points: must be at least 1".into()));
    }
    Ok((1..=points).map(|k| full * k as f64 / points as f64).collect())
}

fn dephase(cfg: &Config, ctx: &Context) -> Result<Report, CliError> {
    cfg.control()?;
    let ds = durations(cfg)?;
    for &d in &ds {
        cfg.control_over(d)?;
    }
    let g = correlation(cfg)?;
    let curve = coherence_curve(
        &g,
        |d| cfg.control_over(d).map_err(|e| Error::Domain(e.to_string())),
        &ds,
    )?;
    let meta = ctx.metadata(
        "dephase",
        None,
        Some(*g.grid()),
        vec![("padding", PADDING_TOLERANCE), ("chi_slack", CHI_SLACK)],
    );
    let mut report = Report::default();
    report.outputs.csv("decay.csv", &meta, |w| write_curve_csv(w, &curve));
    Ok(report)
}

fn sample(cfg: &Config, ctx: &Context) -> Result<Report, CliError> {
    let sc = cfg.sampler.as_ref().ok_or_else(|| missing("sampler"))?;
    if sc.m < 2 {
        return Err(CliError::Config("sampler.M: must be at least 2".into()));
    }
    let seed = ctx.seed_or(sc.seed);
    let f = cfg.control()?;
    let spec = cfg.kernel()?;
    let k = discretize_kernel(&spec, &cfg.grid()?)?;
    let g = kernel_to_correlation(&k, cfg.boundary())?;
    let factor = match sc.factor {
        FactorChoice::Covariance => factorize_covariance(&g)?,
        FactorChoice::Precision => factorize_precision(&k, cfg.boundary())?,
    };
    let exact = attenuation_time_basis(&g, &f)?;
    let est = monte_carlo_coherence(&factor, std::slice::from_ref(&f), sc.m, seed)?[0];
    let target = exact.coherence;
    let z = if est.std_error > 0.0 {
        (est.mean_real - target) / est.std_error
    } else if est.mean_real == target {
        0.0
    } else {
        f64::INFINITY
    };
    let agrees = est.agrees_with(exact.chi, sc.sigmas);
    let meta = ctx.metadata(
        "sample",
        Some(seed),
        Some(*g.grid()),
        vec![("padding", PADDING_TOLERANCE), ("sigmas", sc.sigmas)],
    );
    let mut report = Report::default();
    report.outputs.csv("sample.csv", &meta, |w| {
        writeln!(w, "label,chi,exact_coherence,mc_real,mc_imag,std_error,std_error_imag,z,M,agrees")?;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            f.label(),
            fmt_f64(exact.chi),
            fmt_f64(target),
            fmt_f64(est.mean_real),
            fmt_f64(est.mean_imag),
            fmt_f64(est.std_error),
            fmt_f64(est.std_error_imag),
            fmt_f64(z),
            est.m,
            agrees
        )
    });
    let mut summary = json!({
        "control": f.label(),
        "exact": exact,
        "estimate": est,
        "z": if z.is_finite() { json!(z) } else { json!(null) },
        "agrees": agrees,
        "factor": {
            "method": factor.method(),
            "rank": factor.rank(),
            "jitter": factor.jitter(),
            "dropped_modes": factor.dropped_modes(),
        },
    });
    let stored = sc.dump_paths.min(MAX_DUMPED_PATHS);
    let regularity_paths = sc.regularity_lag.map_or(0, |_| sc.m.min(2000));
    let keep = stored.max(regularity_paths);
    if keep > 0 {
        let paths = sample_paths(&factor, keep, seed);
        if stored > 0 {
            report.outputs.csv("paths.csv", &meta, |w| write_paths_csv(&paths[..stored], w));
        }
        if let Some(lag) = sc.regularity_lag {
            let order = spec.effective_order().unwrap_or(0);
            summary["regularity"] = json!(sample_path_regularity(&paths, order, lag)?);
        }
    }
    report.outputs.json("sample.json", &meta, summary);
    if !agrees {
        report.failure = Some(format!(
            "Monte Carlo coherence {} differs from exact {} by {z:.2} standard errors (threshold {})",
            est.mean_real, target, sc.sigmas
        ));
    }
    Ok(report)
}

fn reconstruct(cfg: &Config, ctx: &Context) -> Result<Report, CliError> {
    let sp = cfg.spectroscopy.as_ref().ok_or_else(|| missing("spectroscopy"))?;
    if !(sp.sigma >= 0.0) {
        return Err(CliError::Config("spectroscopy.sigma: must be non-negative".into()));
    }
    let seed = ctx.seed_or(sp.seed);
    let spec = cfg.kernel()?;
    let grid = cfg.grid()?;
    let g = correlation(cfg)?;
    let dec = decompose(&g, sp.cutoff)?;
    let bank = match &sp.probes {
        ProbeConfig::Eigen { count } => {
            if *count == 0 || *count > dec.len() {
                return Err(CliError::Config(format!(
                    "spectroscopy.probes.count: must lie in 1..={} (retained modes)",
                    dec.len()
                )));
            }
            design_filter_bank_eigen(&dec, &(0..*count).collect::<Vec<_>>())?
        }
        ProbeConfig::Tones {
            omegas,
            t0,
            duration,
            tapered,
        } => {
            let (t0, d) = cfg.window(*t0, *duration)?;
            let bank = if *tapered {
                design_filter_bank_tapered(&grid, omegas, t0, d)
            } else {
                design_filter_bank_cw(&grid, omegas, t0, d)
            };
            bank.map_err(|e| CliError::Config(format!("spectroscopy.probes: {e}")))?
        }
    };
    let noise = NoiseModel {
        sigma: sp.sigma,
        reps: sp.reps,
        seed,
    };
    let policy = sp
        .amplitude
        .map_or_else(AmplitudePolicy::default, |amplitude| AmplitudePolicy::Fixed { amplitude });
    let meas = simulate_measurements(&bank, &g, &noise, policy)?;
    let est = match (&sp.probes, &sp.fit) {
        (ProbeConfig::Eigen { .. }, None) => reconstruct_nonparametric(&bank, &meas, &dec)?,
        (ProbeConfig::Eigen { .. }, Some(_)) => {
            return Err(CliError::Config(
                "spectroscopy.fit: needs tone probes (frequency labels)".into(),
            ))
        }
        (ProbeConfig::Tones { .. }, None) => reconstruct_frequency(&meas)?,
        (ProbeConfig::Tones { .. }, Some(fit)) => fit_local_in_time(&meas, fit.n_max, fit.criterion)?,
    };
    let truth: Vec<Option<f64>> = est
        .labels
        .iter()
        .map(|l| match l {
            ProbeLabel::Mode { index, .. } => dec.modes.get(*index).map(|m| m.eigenvalue),
            ProbeLabel::Frequency { omega } if spec.is_stationary() && spec.dim() == 1 => {
                stationary_spectrum_scalar(&spec, *omega).ok()
            }
            _ => None,
        })
        .collect();
    let meta = ctx.metadata(
        "reconstruct",
        Some(seed),
        Some(grid),
        vec![("padding", PADDING_TOLERANCE), ("cutoff", sp.cutoff), ("sigma", sp.sigma)],
    );
    let mut report = Report::default();
    report.outputs.csv("spectrum.csv", &meta, |w| est.write_csv(w));
    report.outputs.csv("comparison.csv", &meta, |w| {
        writeln!(w, "label,omega,S_est,S_true,relative_error")?;
        for (k, l) in est.labels.iter().enumerate() {
            let cell = |v: Option<f64>| v.map_or(String::new(), fmt_f64);
            let rel = truth[k].map(|t| (est.s[k] - t) / t);
            writeln!(
                w,
                "{},{},{},{},{}",
                l.text(),
                cell(l.omega()),
                fmt_f64(est.s[k]),
                cell(truth[k]),
                cell(rel)
            )?;
        }
        Ok(())
    });
    report
        .outputs
        .json("measurements.json", &meta, serde_json::to_value(&meas).expect("serialisable"));
    report
        .outputs
        .json("spectrum.json", &meta, serde_json::to_value(&est).expect("serialisable"));
    Ok(report)
}

fn optimize(cfg: &Config, ctx: &Context) -> Result<Report, CliError> {
    let oc = cfg.optimizer.as_ref().ok_or_else(|| missing("optimizer"))?;
    let seed = ctx.seed_or(oc.seed);
    let grid = cfg.grid()?;
    let dim = cfg.kernel()?.dim();
    let (t0, duration) = match &cfg.control {
        Some(c) if oc.t0.is_none() && oc.duration.is_none() => cfg.window(c.t0, c.duration)?,
        _ => cfg.window(oc.t0, oc.duration)?,
    };
    let coupling = oc
        .coupling
        .clone()
        .or_else(|| cfg.control.as_ref().and_then(|c| c.coupling.clone()))
        .unwrap_or_else(|| vec![1.0; dim]);
    if coupling.len() != dim {
        return Err(CliError::Config(format!(
            "optimizer.coupling: has {} entries, kernel has {dim} channels",
            coupling.len()
        )));
    }
    let g = correlation(cfg)?;
    let dec = decompose(&g, oc.cutoff)?;
    let opts = OptimizerOptions {
        starts: oc.starts,
        seed,
        ..OptimizerOptions::default()
    };
    let best = optimize_pulse_times(&dec, t0, duration, oc.pulses, &coupling, &opts)
        .map_err(|e| match e {
            Error::Domain(m) => CliError::Config(format!("optimizer: {m}")),
            other => other.into(),
        })?;
    let free = control_free(&grid, 1.0, t0, duration)?.with_coupling(coupling.clone())?;
    let train = |times: Vec<f64>| {
        noisepath::modulation::control_pulse_train(&grid, 1.0, t0, duration, &times)?.with_coupling(coupling.clone())
    };
    let p = oc.pulses;
    let mut candidates = vec![("optimized".to_string(), best.control(&dec)?)];
    if p > 0 {
        candidates.push(("cpmg".into(), train(noisepath::modulation::cpmg_times(t0, duration, p))?));
        candidates.push(("uhrig".into(), train(noisepath::modulation::uhrig_times(t0, duration, p))?));
    }
    let rows = protection_report(&dec, &free, &candidates)?;
    let (_, floor) = eigenmode_floor(&dec)?;
    let meta = ctx.metadata(
        "optimize",
        Some(seed),
        Some(grid),
        vec![
            ("padding", PADDING_TOLERANCE),
            ("cutoff", oc.cutoff),
            ("tol", opts.tol),
        ],
    );
    let mut report = Report::default();
    report.outputs.csv("report.csv", &meta, |w| write_report_csv(&rows, w));
    let mut doc = serde_json::to_value(&best).expect("serialisable");
    doc["unit_norm_floor"] = json!(floor);
    report.outputs.json("optimize.json", &meta, doc);
    Ok(report)
}

fn propagate(cfg: &Config, ctx: &Context) -> Result<Report, CliError> {
    let mc = cfg.markov.as_ref().ok_or_else(|| missing("markov"))?;
    let spec = cfg.kernel()?;
    let grid = cfg.grid()?;
    let dt = mc.dt.unwrap_or(grid.dt());
    if !(dt > 0.0) || !(mc.tf > mc.t0) {
        return Err(CliError::Config("markov: need dt > 0 and tf > t0".into()));
    }
    let order = spec
        .effective_order()
        .ok_or_else(|| CliError::Config("kernel: propagation needs a local-in-time kernel".into()))?;
    let components = order.max(1);
    let dim = spec.dim();
    let initial = match &mc.initial {
        Some(v) => {
            if v.len() != dim * components {
                return Err(CliError::Config(format!(
                    "markov.initial: expected {} values ({dim} channels x {components} components)",
                    dim * components
                )));
            }
            GeneralizedState::new(dim, components, v.clone())
                .map_err(|e| CliError::Config(format!("markov.initial: {e}")))?
        }
        None => GeneralizedState::zeros(dim, components),
    };
    let law = propagator(&spec, mc.t0, mc.tf, &initial, dt).map_err(|e| match e {
        Error::Domain(m) => CliError::Config(format!("markov: {m}")),
        other => other.into(),
    })?;
    let steps = ((mc.tf - mc.t0) / dt).round() as usize;
    let t1 = mc.t1.unwrap_or(0.5 * (mc.t0 + mc.tf));
    let ck_general = chapman_kolmogorov_check(&spec, mc.t0, t1, mc.tf, steps, None)?;
    let ck_bare = if order > 1 {
        Some(chapman_kolmogorov_check(&spec, mc.t0, t1, mc.tf, steps, Some(1))?)
    } else {
        None
    };
    let meta = ctx.metadata(
        "propagate",
        None,
        Some(grid),
        vec![("dt", dt), ("max_condition", MAX_CONDITION)],
    );
    let mut report = Report::default();
    report.outputs.csv("ck.csv", &meta, |w| {
        writeln!(w, "state,components,t1,dt,mean_deviation,covariance_deviation")?;
        let rows = [Some(("generalized", &ck_general)), ck_bare.as_ref().map(|r| ("bare", r))];
        for (name, r) in rows.into_iter().flatten() {
            writeln!(
                w,
                "{name},{},{},{},{},{}",
                r.components,
                fmt_f64(r.t1),
                fmt_f64(r.dt),
                fmt_f64(r.mean_deviation),
                fmt_f64(r.covariance_deviation)
            )?;
        }
        Ok(())
    });
    report
        .outputs
        .json("propagator.json", &meta, serde_json::to_value(&law).expect("serialisable"));
    Ok(report)
}

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use mutualism::basin::{map_basins_with, GridSpec};
use mutualism::dynamics::uniform_grid;
use mutualism::estimation::{
    self, Bounds, FitOptions, FitVector, Loss, MultistartOptions, ObservationSeries, Weighting,
};
use mutualism::io::{fmt_f64, to_json, write_json};
use mutualism::sensitivity::{forward_sensitivities, summarize, RankingScale};
use mutualism::{
    equilibria as find_equilibria, integrate, BiomassState, Error, Execution, IntegratorConfig,
    ParamFile, Result, Target, Trajectory,
};
use serde_json::{json, Value};

use crate::{BasinArgs, CommonArgs, FitArgs, LossArg, ScaleArg, SenseArgs, SimulateArgs, WeightArg, WindowArgs};

pub fn exit_code(e: &Error) -> u8 {
    if e.is_precondition() {
        2
    } else if e.is_numerical() {
        3
    } else {
        1
    }
}

const SIM_TOLERANCES: (f64, f64) = (1e-10, 1e-12);

fn tolerances(common: &CommonArgs, default: (f64, f64)) -> (f64, f64) {
    (common.tol_rel.unwrap_or(default.0), common.tol_abs.unwrap_or(default.1))
}

fn setup(common: &CommonArgs) -> Result<ParamFile> {
    let ok = |t: Option<f64>| t.is_none_or(|v| v > 0.0);
    if !(ok(common.tol_rel) && ok(common.tol_abs)) {
        return Err(Error::Precondition("tolerances must be positive".into()));
    }
    let file = ParamFile::read(&common.params)?;
    fs::create_dir_all(&common.out)?;
    Ok(file)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

/// `run.json`: the parsed parameters and every option of the invocation.
fn write_run(
    common: &CommonArgs,
    file: &ParamFile,
    command: &str,
    tol: (f64, f64),
    options: Value,
    status: &str,
) -> Result<()> {
    let meta = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "params_file": common.params,
        "params": file,
        "tol_rel": tol.0,
        "tol_abs": tol.1,
        "options": options,
        "status": status,
    });
    write_json(common.out.join("run.json"), &meta)
}

fn window_config(common: &CommonArgs, w: &WindowArgs) -> Result<(IntegratorConfig, BiomassState)> {
    if !(w.t0.is_finite() && w.t1 > w.t0) {
        return Err(Error::Precondition(format!("time window [{}, {}] is empty", w.t0, w.t1)));
    }
    if !(w.dt > 0.0) {
        return Err(Error::Precondition("dt must be positive".into()));
    }
    let n = ((w.t1 - w.t0) / w.dt).round().max(1.0) as usize;
    let (rel, abs) = tolerances(common, SIM_TOLERANCES);
    let mut cfg = IntegratorConfig::new(w.t0, w.t1)
        .with_tolerances(rel, abs)
        .with_grid(uniform_grid(w.t0, w.t1, n));
    cfg.stop_at_terminal = false;
    let init = BiomassState::new(w.a0, w.f0);
    init.check_nonnegative()?;
    Ok((cfg, init))
}

fn window_json(w: &WindowArgs) -> Value {
    json!({"t0": w.t0, "t1": w.t1, "a0": w.a0, "f0": w.f0, "dt": w.dt})
}

/// `log10(A + 1)`, `log10(F + 1)` and their ratio; the ratio is left empty
/// where the fungus term is zero.
fn write_derived<W: Write>(traj: &Trajectory, mut w: W) -> Result<()> {
    writeln!(w, "t,log10A1,log10F1,ratio")?;
    for (t, s) in traj.iter() {
        let la = (s.ants + 1.0).log10();
        let lf = (s.fungus + 1.0).log10();
        let ratio = if lf == 0.0 { String::new() } else { fmt_f64(la / lf) };
        writeln!(w, "{},{},{},{}", fmt_f64(t), fmt_f64(la), fmt_f64(lf), ratio)?;
    }
    Ok(())
}

fn write_trajectory(dir: &Path, traj: &Trajectory) -> Result<()> {
    let mut f = create(dir, "trajectory.csv")?;
    traj.write_csv(&mut f)?;
    f.flush()?;
    let mut f = create(dir, "derived.csv")?;
    write_derived(traj, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn simulate(args: &SimulateArgs) -> Result<()> {
    let file = setup(&args.common)?;
    let (cfg, init) = window_config(&args.common, &args.window)?;
    let options = window_json(&args.window);
    match integrate(&file.params, init, &cfg) {
        Ok(traj) => {
            write_trajectory(&args.common.out, &traj)?;
            write_run(&args.common, &file, "simulate", tolerances(&args.common, SIM_TOLERANCES), options.clone(), "ok")?;
            println!("wrote {} samples to {}", traj.len(), args.common.out.display());
            Ok(())
        }
        Err(Error::Integration { t, reason, partial }) => {
            write_trajectory(&args.common.out, &partial)?;
            write_run(&args.common, &file, "simulate", tolerances(&args.common, SIM_TOLERANCES), options.clone(), "partial")?;
            Err(Error::Integration { t, reason, partial })
        }
        Err(e) => Err(e),
    }
}

pub fn equilibria(args: &CommonArgs) -> Result<()> {
    let file = setup(args)?;
    let report = find_equilibria(&file.params)?;
    let mut f = create(&args.out, "equilibria.json")?;
    report.write_json(&file.params, &mut f)?;
    f.flush()?;
    write_run(args, &file, "equilibria", tolerances(args, SIM_TOLERANCES), json!({}), "ok")?;
    println!(
        "regime {:?}, threshold a* = {}, {} interior point(s)",
        report.regime,
        report.threshold,
        report.interior.len()
    );
    Ok(())
}

fn parse_pair<T: std::str::FromStr>(s: &str, sep: char, what: &str) -> Result<(T, T)> {
    let bad = || Error::Precondition(format!("cannot parse {what} `{s}`"));
    let (a, b) = s.split_once(sep).ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

pub fn basin(args: &BasinArgs) -> Result<()> {
    let file = setup(&args.common)?;
    let (na, nf) = parse_pair::<usize>(&args.grid.to_lowercase(), 'x', "grid")?;
    let grid = GridSpec::new(
        parse_pair(&args.a_range, ':', "A range")?,
        parse_pair(&args.f_range, ':', "F range")?,
        na,
        nf,
    )?;
    let tol = tolerances(&args.common, SIM_TOLERANCES);
    let cfg = IntegratorConfig::new(0.0, args.horizon).with_tolerances(tol.0, tol.1);
    let exec = if args.sequential { Execution::Sequential } else { Execution::Parallel };
    let map = map_basins_with(&file.params, &grid, &cfg, exec)?;

    let dir = &args.common.out;
    let mut f = create(dir, "basin_labels.csv")?;
    map.write_labels_csv(&mut f)?;
    f.flush()?;
    let mut f = create(dir, "basin_mask.csv")?;
    map.write_mask_csv(&mut f)?;
    f.flush()?;
    write_json(dir.join("basin.json"), &map.sidecar(&file.params))?;
    let options = json!({
        "grid": args.grid,
        "a_range": args.a_range,
        "f_range": args.f_range,
        "horizon": args.horizon,
        "sequential": args.sequential,
    });
    write_run(&args.common, &file, "basin", tol, options, "ok")?;
    println!(
        "origin {}, interior {}, undecided {}, soundness violations {}",
        map.count(mutualism::AttractorLabel::Origin),
        map.count(mutualism::AttractorLabel::Interior),
        map.count(mutualism::AttractorLabel::Undecided),
        map.soundness_violations().len()
    );
    Ok(())
}

fn parse_targets(list: &str) -> Result<Vec<Target>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect()
}

pub fn sense(args: &SenseArgs) -> Result<()> {
    let file = setup(&args.common)?;
    let (cfg, init) = window_config(&args.common, &args.window)?;
    let targets = parse_targets(&args.targets)?;
    let run = forward_sensitivities(&file.params, init, &targets, &cfg)?;
    let dir = &args.common.out;
    let mut f = create(dir, "trajectory.csv")?;
    run.trajectory.write_csv(&mut f)?;
    f.flush()?;
    for s in &run.sensitivities {
        let mut f = create(dir, &format!("sens_{}.csv", s.target.name()))?;
        s.write_csv(&mut f)?;
        f.flush()?;
    }
    let scale = match args.scale {
        ScaleArg::Raw => RankingScale::Raw,
        ScaleArg::Scaled => RankingScale::Scaled,
    };
    let summary = summarize(&run.sensitivities, scale);
    write_json(dir.join("sensitivity_summary.json"), &summary)?;
    let mut options = window_json(&args.window);
    options["targets"] = json!(targets);
    options["scale"] = json!(scale);
    write_run(&args.common, &file, "sense", tolerances(&args.common, SIM_TOLERANCES), options, "ok")?;
    let order: Vec<&str> = summary.ranking.iter().map(|e| e.target.name()).collect();
    println!("ranking ({scale:?}): {}", order.join(" > "));
    Ok(())
}

pub fn fit(args: &FitArgs) -> Result<()> {
    let file = setup(&args.common)?;
    let data = ObservationSeries::read_path(&args.data)?;
    let first = data.rows()[0];
    let init = BiomassState::new(
        args.a0.unwrap_or(first.ants_mean),
        args.f0.unwrap_or(first.fungus_mean),
    );
    let guess = FitVector::new(&file.params, init);
    let mut opts = FitOptions {
        loss: match args.loss {
            LossArg::Raw => Loss::Raw,
            LossArg::Log10p1 => Loss::Log10p1,
        },
        weighting: match args.weighting {
            WeightArg::Auto => Weighting::Auto,
            WeightArg::Unit => Weighting::Unit,
            WeightArg::InverseVariance => Weighting::InverseVariance,
        },
        ..FitOptions::default()
    }
    .free_initials(args.free_initials);
    let tol = tolerances(&args.common, (opts.rel_tol, opts.abs_tol));
    opts.rel_tol = tol.0;
    opts.abs_tol = tol.1;
    let fixed = parse_targets(&args.fix)?;
    for t in &fixed {
        opts = opts.fix(*t);
    }
    let bounds = Bounds::default();
    let dir = &args.common.out;

    let best = if args.multistart == 0 {
        estimation::fit(&data, &guess, &bounds, &opts)?
    } else {
        let ms = MultistartOptions {
            starts: args.multistart,
            seed: args.seed,
            ..MultistartOptions::default()
        };
        let result = estimation::multistart(&data, &guess, &bounds, &opts, &ms)?;
        let minima: Vec<Value> = result
            .minima
            .iter()
            .map(|k| {
                let mut v = estimation::report_json(result.fits[*k].as_ref().unwrap());
                v["start"] = json!(k);
                v
            })
            .collect();
        let failures: Vec<Value> = result
            .fits
            .iter()
            .enumerate()
            .filter_map(|(k, r)| r.as_ref().err().map(|e| json!({"start": k, "error": e})))
            .collect();
        write_json(
            dir.join("multistart.json"),
            &json!({"starts": result.starts, "minima": minima, "failures": failures}),
        )?;
        println!("{} distinct minima from {} starts", result.minima.len(), args.multistart);
        match result.best() {
            Some(b) => b.clone(),
            None => {
                return Err(Error::Precondition("every multistart branch failed".into()));
            }
        }
    };

    let table = estimation::format_table(&best);
    fs::write(dir.join("fit.json"), to_json(&estimation::report_json(&best))?)?;
    fs::write(dir.join("fit_table.txt"), &table)?;
    let options = json!({
        "data": args.data,
        "multistart": args.multistart,
        "seed": args.seed,
        "free": opts.free,
        "guess": guess,
        "loss": opts.loss,
        "weighting": opts.weighting,
    });
    write_run(&args.common, &file, "fit", tol, options, if best.converged { "ok" } else { "not_converged" })?;
    print!("{table}");
    if !best.converged {
        eprintln!("warning: fit did not converge ({})", best.message);
    }
    Ok(())
}

use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::{json, Value};

use gauss_extremes::asymptotics::{
    crossing_point_prob, fbm_dc_asymptotic, stationary_dc_asymptotic, AsymptoticResult, Convention, DcConstants,
};
use gauss_extremes::constants::{
    corollary_g_comparison, g_integral, generalized_constant, pickands_constant, piterbarg_closed_form,
    piterbarg_constant, with_convergence, EstimateRecord, Normalization, PickandsEstimator,
    PickandsOptions, PiterbargVariant, SupMode,
};
use gauss_extremes::mcverify::{
    compare_report, diagonal_strip_levels, mc_double_crossing_is, mc_double_crossing_levels, McProbability,
};
use gauss_extremes::models::{
    build_fbm_dc_model, build_stationary_dc_model, derive, derive_with_checks, verify_expansion, xi_finite_difference,
    ExpansionProbe, IndexSets,
};
use gauss_extremes::qpp::{check_certificate, generalized_variance};
use gauss_extremes::simulate::{sample_fbm, sample_fbm_cholesky, sample_stationary, Grid, PathBatch};
use gauss_extremes::{solve_qpp, Correlation, CovModel, DerivedData, ExpansionData, Exponent, QppProblem, SymMatrix};

use crate::args::*;
use crate::{Failure, Output, SCHEMA, VERSION};

type Res<T> = Result<T, Failure>;

pub fn run(cmd: &Command) -> Res<Output> {
    match cmd {
        Command::Qpp(a) => qpp(a),
        Command::Genvar(a) => genvar(a),
        Command::Constant(c) => match c {
            ConstantCmd::Pickands(a) => pickands(a),
            ConstantCmd::Piterbarg(a) => piterbarg(a),
            ConstantCmd::Generalized(a) => generalized(a),
            ConstantCmd::GIntegral(a) => g_int(a),
        },
        Command::Dc(c) => match c {
            DcCmd::Stationary(a) => dc(a, ModelArg::Stationary),
            DcCmd::Fbm(a) => dc(a, ModelArg::Fbm),
        },
        Command::Simulate(c) => match c {
            SimulateCmd::Fbm(a) => simulate(a, ModelArg::Fbm),
            SimulateCmd::Stationary(a) => simulate(a, ModelArg::Stationary),
        },
        Command::Verify(c) => match c {
            VerifyCmd::Expansion(a) => verify_exp(a),
            VerifyCmd::Diagonal(a) => verify_diag(a),
        },
    }
}

fn header(command: &str, seed: Option<u64>, config: &impl Serialize) -> serde_json::Map<String, Value> {
    let mut m = serde_json::Map::new();
    m.insert("schema".into(), json!(SCHEMA));
    m.insert("command".into(), json!(command));
    m.insert("version".into(), json!(VERSION));
    m.insert("seed".into(), json!(seed));
    m.insert("config".into(), serde_json::to_value(config).expect("config serializes"));
    m
}

fn document(command: &str, seed: Option<u64>, config: &impl Serialize, result: impl Serialize) -> Output {
    let mut m = header(command, seed, config);
    m.insert("result".into(), serde_json::to_value(result).expect("result serializes"));
    Output::Json(Value::Object(m))
}

fn check(flag: &str, ok: bool, domain: &str) -> Res<()> {
    if ok {
        Ok(())
    } else {
        Err(Failure::usage(format!("{flag} must be {domain}")))
    }
}

fn positive(flag: &str, v: f64) -> Res<()> {
    check(flag, v > 0.0 && v.is_finite(), "a positive finite number")
}

fn at_least_one(flag: &str, n: usize) -> Res<()> {
    check(flag, n >= 1, "at least 1")
}

fn step_within(flag: &str, step: f64, len: f64) -> Res<()> {
    check(flag, step > 0.0 && step <= len, &format!("in (0, {len}]"))
}

fn need_seed(seed: Option<u64>) -> Res<u64> {
    seed.ok_or_else(|| Failure::usage("--seed is required for stochastic commands"))
}

fn levels(flag: &str, us: &[f64]) -> Res<()> {
    check(flag, !us.is_empty() && us.iter().all(|u| *u > 0.0 && u.is_finite()), "a list of positive numbers")
}

fn parse_matrix(flag: &str, text: &str) -> Res<Vec<Vec<f64>>> {
    let rows: Vec<Vec<f64>> =
        serde_json::from_str(text).map_err(|e| Failure::usage(format!("{flag} must be JSON rows of numbers: {e}")))?;
    let n = rows.len();
    check(flag, n > 0 && rows.iter().all(|r| r.len() == n), "a non-empty square matrix")?;
    Ok(rows)
}

/// Input problems found while building a problem from flags are usage errors.
fn input<T>(flag: &str, r: gauss_extremes::Result<T>) -> Res<T> {
    r.map_err(|e| Failure::usage(format!("{flag}: {e}")))
}

fn qpp_problem(a: &QppArgs) -> Res<QppProblem> {
    let rows = parse_matrix("--sigma", &a.sigma)?;
    check("--b", a.b.len() == rows.len(), &format!("of length {}", rows.len()))?;
    check("--b", a.b.iter().all(|v| v.is_finite()), "finite")?;
    check("--b", a.b.iter().any(|v| *v > 0.0), "positive in at least one coordinate")?;
    let sigma = input("--sigma", SymMatrix::from_rows(&rows))?;
    input("--sigma", QppProblem::new(sigma, a.b.clone()))
}

fn qpp(a: &QppArgs) -> Res<Output> {
    let p = qpp_problem(a)?;
    let s = solve_qpp(&p)?;
    let cert = match check_certificate(&p, &s) {
        Ok(()) => "ok".to_string(),
        Err(m) => m,
    };
    Ok(document("qpp", None, a, json!({ "solution": s, "w": s.w, "value": s.value, "certificate": cert })))
}

fn genvar(a: &QppArgs) -> Res<Output> {
    let p = qpp_problem(a)?;
    let (value, s) = generalized_variance(&p.sigma, &p.b)?;
    Ok(document(
        "genvar",
        None,
        a,
        json!({ "generalized_variance": 1.0 / value, "quadratic_value": value, "solution": s }),
    ))
}

fn pickands(a: &PickandsArgs) -> Res<Output> {
    check("--two-h", a.two_h > 0.0 && a.two_h <= 2.0, "in (0, 2]")?;
    positive("--S", a.s)?;
    step_within("--step", a.step, a.s)?;
    at_least_one("--paths", a.paths)?;
    let seed = need_seed(a.seed)?;
    let opts = PickandsOptions {
        estimator: match a.estimator {
            EstimatorArg::Ratio => PickandsEstimator::Ratio,
            EstimatorArg::Truncated => PickandsEstimator::Truncated,
        },
        normalization: normalization(a.normalization),
        sup: sup_mode(a.sup),
    };
    let run = |s: f64, h: f64| pickands_constant(a.two_h, s, h, a.paths, seed, opts);
    let mut rec = run(a.s, a.step)?;
    if a.convergence {
        rec = with_convergence(rec, run)?;
    }
    Ok(document("constant pickands", Some(seed), a, rec))
}

fn normalization(n: NormalizationArg) -> Normalization {
    match n {
        NormalizationArg::Classical => Normalization::Classical,
        NormalizationArg::UnitVariance => Normalization::UnitVariance,
    }
}

fn sup_mode(s: SupArg) -> SupMode {
    match s {
        SupArg::Bridge => SupMode::BridgeExact,
        SupArg::Grid => SupMode::Grid,
    }
}

fn piterbarg(a: &PiterbargArgs) -> Res<Output> {
    check("--lambda", a.lambda.is_finite(), "finite")?;
    positive("--Lambda", a.lambda_max)?;
    step_within("--step", a.step, a.lambda_max)?;
    at_least_one("--paths", a.paths)?;
    let seed = need_seed(a.seed)?;
    let variant = match a.variant {
        VariantArg::Plain => PiterbargVariant::Plain,
        VariantArg::HalfDrift => PiterbargVariant::HalfDrift,
    };
    let closed = piterbarg_closed_form(a.lambda, variant).map_err(|e| Failure::usage(format!("--lambda: {e}")))?;
    let rec = piterbarg_constant(a.lambda, a.lambda_max, a.step, a.paths, seed, variant, sup_mode(a.sup))?;
    Ok(document("constant piterbarg", Some(seed), a, json!({ "estimate": rec, "closed_form": closed })))
}

fn build_model(f: &ModelFlags, kind: ModelArg) -> Res<CovModel> {
    positive("--T", f.horizon)?;
    positive("--a", f.a)?;
    positive("--b", f.b)?;
    match kind {
        ModelArg::Stationary => {
            let theta = f.theta.unwrap_or(1.0);
            positive("--theta", theta)?;
            let alpha = f.alpha.ok_or_else(|| Failure::usage("--alpha is required for a stationary model"))?;
            check("--alpha", alpha > 0.0 && alpha <= 2.0, "in (0, 2]")?;
            input("--alpha", CovModel::stationary(Correlation::pow_exp(theta, alpha), f.horizon, f.a, f.b))
        }
        ModelArg::Fbm => {
            let h = f.hurst.ok_or_else(|| Failure::usage("--H is required for an fBm model"))?;
            check("--H", h > 0.0 && h < 1.0, "in (0, 1)")?;
            input("--H", CovModel::fbm(h, f.horizon, f.a, f.b))
        }
    }
}

fn expansion_of(m: &CovModel, kind: ModelArg) -> Res<ExpansionData> {
    Ok(match kind {
        ModelArg::Stationary => build_stationary_dc_model(m)?,
        ModelArg::Fbm => build_fbm_dc_model(m).map_err(|e| match e {
            gauss_extremes::Error::Model(msg) => Failure::usage(format!("--a/--b: {msg}")),
            other => other.into(),
        })?,
    })
}

fn scalar_field(nu: f64, v: f64, w: f64) -> Res<DerivedData> {
    check("--nu", nu > 0.0 && nu <= 2.0, "in (0, 2]")?;
    check("--v", v >= 0.0 && v.is_finite(), "nonnegative")?;
    check("--w", w >= 0.0 && w.is_finite(), "nonnegative")?;
    check("--v", v > 0.0 || w > 0.0, "positive when --w is zero")?;
    let sets = match (v > 0.0, w > 0.0) {
        (true, false) => IndexSets { pickands: vec![0], ..Default::default() },
        (true, true) => IndexSets { boundary: vec![0], ..Default::default() },
        _ => IndexSets { drift: vec![0], ..Default::default() },
    };
    Ok(DerivedData::from_field(
        vec![Exponent::from_f64(nu)],
        sets,
        vec![DMatrix::from_element(1, 1, v)],
        vec![DMatrix::from_element(1, 1, w)],
    )?)
}

fn generalized(a: &GeneralizedArgs) -> Res<Output> {
    positive("--S", a.s)?;
    positive("--Lambda", a.lambda_max)?;
    step_within("--step", a.step, a.s.min(a.lambda_max))?;
    at_least_one("--paths", a.paths)?;
    let seed = need_seed(a.seed)?;
    let sources = a.model.is_some() as u8 + a.expansion.is_some() as u8 + a.nu.is_some() as u8;
    check("--model/--expansion/--nu", sources == 1, "given exactly once")?;
    let dd = if let Some(kind) = a.model {
        let m = build_model(&a.flags, kind)?;
        derive(&expansion_of(&m, kind)?)?
    } else if let Some(path) = &a.expansion {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("--expansion: {e}")))?;
        let e: ExpansionData =
            serde_json::from_str(&text).map_err(|e| Failure::usage(format!("--expansion: {e}")))?;
        input("--expansion", e.validate())?;
        derive(&e)?
    } else {
        scalar_field(a.nu.unwrap_or(1.0), a.v.unwrap_or(0.0), a.w.unwrap_or(0.0))?
    };
    let rec = generalized_constant(&dd, a.s, a.lambda_max, a.step, a.paths, seed)?;
    Ok(document("constant generalized", Some(seed), a, json!({ "estimate": rec, "sets": dd.sets, "nu": dd.nu })))
}

fn g_int(a: &GIntegralArgs) -> Res<Output> {
    check("--beta", a.beta.iter().all(|b| *b > 0.0 && b.is_finite()), "positive")?;
    let rows = parse_matrix("--xi", &a.xi)?;
    check("--xi", rows.len() == a.beta.len(), &format!("{0}x{0} to match --beta", a.beta.len()))?;
    positive("--cutoff", a.cutoff)?;
    check("--tol", a.tol > 0.0 && a.tol < 1.0, "in (0, 1)")?;
    let n = rows.len();
    let xi = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
    let value = g_integral(&a.beta, &xi, a.cutoff, a.tol)?;
    let diagonal = (0..n).all(|i| (0..n).all(|j| i == j || xi[(i, j)] == 0.0));
    let corollary = if diagonal {
        let half: Vec<f64> = (0..n).map(|i| xi[(i, i)] / 2.0).collect();
        Some(corollary_g_comparison(&a.beta, &half)?)
    } else {
        None
    };
    Ok(document("constant g-integral", None, a, json!({ "value": value, "corollary_comparison": corollary })))
}

/// The Pickands exponent needed by the closed form, when the model is in that regime.
fn pickands_exponent(m: &CovModel) -> Option<f64> {
    match m.hurst() {
        // fBm uses the constant at 2H on both sides of 1/2; at H = 1/2 the exact value is known
        Some(h) => (h != 0.5).then_some(2.0 * h),
        None => {
            let al = m.correlation()?.alpha();
            (al.compare(&Exponent::rational(1, 1).ok()?) == std::cmp::Ordering::Less).then(|| al.value())
        }
    }
}

fn dc(a: &DcArgs, kind: ModelArg) -> Res<Output> {
    let m = build_model(&a.flags, kind)?;
    levels("--u", &a.u)?;
    let want_mc = a.mc || a.compare;
    let want_asym = a.asymptotic || a.compare || !a.mc;
    let seed = if want_mc || a.estimate_constants { Some(need_seed(a.seed)?) } else { a.seed };
    if want_mc {
        at_least_one("--paths", a.paths)?;
        step_within("--step", a.step, m.horizon)?;
    }
    if a.importance {
        check("--importance", kind == ModelArg::Stationary, "used with a stationary model")?;
    }
    if let Some(p) = a.pickands {
        positive("--pickands", p)?;
        check("--pickands-se", a.pickands_se >= 0.0, "nonnegative")?;
    }
    if let Some(v) = &a.piterbarg {
        check("--piterbarg", v.iter().all(|x| *x > 0.0 && x.is_finite()), "positive")?;
    }

    let mut asym: Vec<AsymptoticResult> = Vec::new();
    let mut consts = DcConstants::with_convention(match a.convention {
        ConventionArg::Display => Convention::Display,
        ConventionArg::MainTheorem => Convention::MainTheorem,
    });
    if want_asym {
        consts.piterbarg = a.piterbarg.clone();
        if let Some(p) = a.pickands {
            consts.pickands = Some(EstimateRecord::supplied(p, a.pickands_se, normalization(a.pickands_normalization)));
        } else if let (true, Some(alpha)) = (a.estimate_constants, pickands_exponent(&m)) {
            positive("--const-S", a.const_s)?;
            step_within("--const-step", a.const_step, a.const_s)?;
            at_least_one("--const-paths", a.const_paths)?;
            let opts = PickandsOptions { normalization: Normalization::UnitVariance, ..Default::default() };
            let s = seed.expect("seed checked");
            consts.pickands = Some(pickands_constant(alpha, a.const_s, a.const_step, a.const_paths, s, opts)?);
        }
        for &u in &a.u {
            asym.push(match kind {
                ModelArg::Stationary => stationary_dc_asymptotic(&m, u, &consts)?,
                ModelArg::Fbm => fbm_dc_asymptotic(&m, u, &consts).map_err(|e| match e {
                    gauss_extremes::Error::Model(msg) => Failure::usage(format!("--a/--b: {msg}")),
                    other => other.into(),
                })?,
            });
        }
    }
    let mut mc: Vec<McProbability> = Vec::new();
    if want_mc {
        let s = seed.expect("seed checked");
        let grid = input("--step", Grid::with_step(m.horizon, a.step))?;
        mc = if a.importance {
            a.u.iter().map(|&u| mc_double_crossing_is(&m, u, &grid, a.paths, s)).collect::<Result<_, _>>()?
        } else {
            mc_double_crossing_levels(&m, &a.u, &grid, a.paths, s)?
        };
    }
    let report = if a.compare { Some(compare_report(&asym, &mc)?) } else { None };
    let command = match kind {
        ModelArg::Stationary => "dc stationary",
        ModelArg::Fbm => "dc fbm",
    };
    if a.format == FormatArg::Csv {
        let r = report.ok_or_else(|| Failure::usage("--format csv needs --compare"))?;
        let mut buf = Vec::new();
        r.write_csv(&mut buf)?;
        let mut meta = header(command, seed, a);
        meta.insert("verdict".into(), json!(r.verdict));
        meta.insert("reason".into(), json!(r.reason));
        return Ok(Output::Csv { text: String::from_utf8(buf).expect("CSV is UTF-8"), meta: Value::Object(meta) });
    }
    let point: Vec<f64> = a.u.iter().map(|&u| crossing_point_prob(&m, u)).collect::<Result<_, _>>()?;
    Ok(document(
        command,
        seed,
        a,
        json!({
            "model": m,
            "point_probability": point,
            "asymptotic": if want_asym { Some(&asym) } else { None },
            "mc": if want_mc { Some(&mc) } else { None },
            "compare": report,
        }),
    ))
}

fn simulate(a: &SimulateArgs, kind: ModelArg) -> Res<Output> {
    let m = build_model(&a.flags, kind)?;
    at_least_one("--paths", a.paths)?;
    let seed = need_seed(a.seed)?;
    let grid = match (a.steps, a.step) {
        (Some(_), Some(_)) => return Err(Failure::usage("--steps and --step are mutually exclusive")),
        (Some(n), None) => {
            at_least_one("--steps", n)?;
            input("--steps", Grid::uniform(m.horizon, n))?
        }
        (None, Some(h)) => {
            step_within("--step", h, m.horizon)?;
            input("--step", Grid::with_step(m.horizon, h))?
        }
        (None, None) => input("--steps", Grid::uniform(m.horizon, 1024))?,
    };
    let batch: PathBatch = match (kind, a.scheme) {
        (ModelArg::Fbm, SchemeArg::Auto) => sample_fbm(m.hurst().expect("fbm"), &grid, a.paths, seed)?,
        (ModelArg::Fbm, SchemeArg::Cholesky) => sample_fbm_cholesky(m.hurst().expect("fbm"), &grid, a.paths, seed)?,
        (ModelArg::Stationary, SchemeArg::Auto) => {
            sample_stationary(m.correlation().expect("stationary"), &grid, a.paths, seed)?
        }
        (ModelArg::Stationary, SchemeArg::Cholesky) => {
            return Err(Failure::usage("--scheme cholesky is available for fbm only"))
        }
    };
    let command = match kind {
        ModelArg::Stationary => "simulate stationary",
        ModelArg::Fbm => "simulate fbm",
    };
    match a.format {
        FormatArg::Csv => {
            let mut buf = Vec::new();
            batch.write_csv(&mut buf, Some(&grid))?;
            let mut meta = header(command, Some(seed), a);
            meta.insert("scheme".into(), json!(batch.scheme));
            meta.insert("fallback".into(), json!(batch.fallback));
            Ok(Output::Csv { text: String::from_utf8(buf).expect("CSV is UTF-8"), meta: Value::Object(meta) })
        }
        FormatArg::Json => {
            let paths: Vec<&[f64]> = (0..batch.n_paths).map(|i| batch.path(i)).collect();
            Ok(document(
                command,
                Some(seed),
                a,
                json!({ "grid": grid.points(), "scheme": batch.scheme, "fallback": batch.fallback, "paths": paths }),
            ))
        }
    }
}

fn verify_exp(a: &VerifyExpansionArgs) -> Res<Output> {
    let m = build_model(&a.flags, a.model)?;
    check("--radii", !a.radii.is_empty() && a.radii.iter().all(|r| *r > 0.0 && *r < m.horizon), "in (0, T)")?;
    at_least_one("--directions", a.directions)?;
    check("--radius", a.radius > 0.0 && a.radius < m.horizon, "in (0, T)")?;
    let e = expansion_of(&m, a.model)?;
    let (dd, checks) = derive_with_checks(&e)?;
    let probe = ExpansionProbe { radii: a.radii.clone(), directions: a.directions, seed: a.probe_seed };
    let report = verify_expansion(&m, &e, &probe)?;
    let fd = xi_finite_difference(&m, &e, a.radius)?;
    let n = dd.n;
    // entry (i, j) is compared against sqrt(|Xi_ii Xi_jj|), the scale of the quadratic form
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let scale = (dd.xi_matrix[(i, i)] * dd.xi_matrix[(j, j)]).abs().sqrt();
            worst = worst.max((fd[(i, j)] - dd.xi_matrix[(i, j)]).abs() / scale);
        }
    }
    let rows = |mm: &DMatrix<f64>| (0..n).map(|i| (0..n).map(|j| mm[(i, j)]).collect()).collect::<Vec<Vec<f64>>>();
    let pass = checks.iter().all(|c| c.passed) && report.pass;
    Ok(document(
        "verify expansion",
        None,
        a,
        json!({
            "pass": pass,
            "checks": checks,
            "expansion": report,
            "expansion_data": e,
            "w": dd.w,
            "xi_algebraic": rows(&dd.xi_matrix),
            "xi_finite_difference": rows(&fd),
            "xi_max_relative_difference": worst,
        }),
    ))
}

fn verify_diag(a: &VerifyDiagonalArgs) -> Res<Output> {
    let m = build_model(&a.flags, a.model)?;
    check("--eps", a.eps > 0.0 && a.eps <= m.horizon, "in (0, T]")?;
    levels("--u", &a.u)?;
    at_least_one("--paths", a.paths)?;
    step_within("--step", a.step, m.horizon)?;
    let seed = need_seed(a.seed)?;
    let grid = input("--step", Grid::with_step(m.horizon, a.step))?;
    let (strip, full) = diagonal_strip_levels(&m, a.eps, &a.u, &grid, a.paths, seed)?;
    let rows: Vec<Value> = strip
        .iter()
        .zip(&full)
        .map(|(s, f)| {
            let ratio = if s.p_hat > 0.0 && f.p_hat > 0.0 && f.p_hat < 1.0 { Some(s.p_hat.ln() / f.p_hat.ln()) } else { None };
            json!({ "u": s.u, "strip": s, "full": f, "log_ratio": ratio })
        })
        .collect();
    Ok(document("verify diagonal", Some(seed), a, json!({ "levels": rows })))
}

//! CSV exports of policy surfaces and feature diagnostics from a finished
//! run directory.
//!
//! Every export writes one CSV: `#`-prefixed metadata lines (kind, config
//! hash, iteration, axis ranges, per-network statistics), then a header row,
//! then data rows with floats printed to 17 significant digits. Outputs are
//! deterministic functions of the run directory contents.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::aiyagari::AiyagariEquilibrium;
use crate::checkpoint;
use crate::economy::{AggState, ProdLevel};
use crate::error::{Error, Result};
use crate::jsonfmt::fmt_f64;
use crate::measures::Grid;
use crate::samples::{read_samples_file, SampleSet};
use crate::solver::{iter_dir, net_ckpt_path, policy_savings, FourNets, RunMeta};

/// Everything an export needs, loaded from a run directory.
pub struct ExportContext {
    pub run_dir: PathBuf,
    pub meta: RunMeta,
    pub grid: Arc<Grid>,
    pub nets: FourNets,
    pub samples: SampleSet,
    pub equilibrium: AiyagariEquilibrium,
    /// Index of the iteration whose checkpoints were loaded (the latest).
    pub iteration: usize,
}

/// Loads the latest completed iteration of a run directory.
pub fn load_run(run_dir: &Path) -> Result<ExportContext> {
    let meta_path = run_dir.join("run.json");
    if !meta_path.exists() {
        return Err(Error::RunDir(format!(
            "{} has no run.json; not a run directory",
            run_dir.display()
        )));
    }
    let meta: RunMeta = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)?;
    if meta.completed_iterations == 0 {
        return Err(Error::RunDir("run has no completed iterations".into()));
    }
    let iteration = meta.completed_iterations - 1;
    let grid = Arc::new(Grid::read_json_file(&run_dir.join("grid.json"))?);
    let dir = iter_dir(run_dir, iteration);
    let nets = FourNets::from_fn(|i, j| {
        checkpoint::load_matching(&net_ckpt_path(&dir, i, j), &meta.net_spec).map(|(n, _)| n)
    })?;
    let (samples, _) = read_samples_file(&run_dir.join("samples.json"), &meta.params)?;
    let equilibrium = AiyagariEquilibrium::read_json_file(&run_dir.join("aiyagari.json"))?;
    Ok(ExportContext {
        run_dir: run_dir.to_path_buf(),
        meta,
        grid,
        nets,
        samples,
        equilibrium,
        iteration,
    })
}

fn write_csv(path: &Path, meta: &[String], header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for line in meta {
        writeln!(w, "# {line}")?;
    }
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn base_meta(ctx: &ExportContext, kind: &str) -> Vec<String> {
    vec![
        format!("kind={kind}"),
        format!("config_hash={:016x}", ctx.meta.config_hash),
        format!("iteration={}", ctx.iteration),
    ]
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("no NaN in medians"));
    values[values.len() / 2]
}

/// Per-network median feature vector over the stored sample measures.
fn median_features(ctx: &ExportContext, i: AggState, j: ProdLevel) -> Result<Vec<f64>> {
    let d0 = ctx.meta.net_spec.n_features;
    let mut out = Vec::with_capacity(d0);
    if d0 == 0 {
        return Ok(out);
    }
    let net = ctx.nets.get(i, j);
    let mut per_component: Vec<Vec<f64>> = vec![Vec::new(); d0];
    for s in &ctx.samples.samples {
        let f = net.features(s.measure.coeffs())?;
        for (c, v) in f.into_iter().enumerate() {
            per_component[c].push(v);
        }
    }
    for comp in per_component {
        out.push(median(comp));
    }
    Ok(out)
}

fn sample_rate_range(ctx: &ExportContext, i: AggState) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in &ctx.samples.samples {
        let r = s.prices[i.idx()].r;
        lo = lo.min(r);
        hi = hi.max(r);
    }
    (lo, hi)
}

fn feature_range(ctx: &ExportContext, i: AggState, j: ProdLevel) -> Result<(f64, f64)> {
    let net = ctx.nets.get(i, j);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in &ctx.samples.samples {
        let f = net.features(s.measure.coeffs())?[0];
        lo = lo.min(f);
        hi = hi.max(f);
    }
    Ok((lo, hi))
}

fn lattice(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| lo + (hi - lo) * k as f64 / (n.max(2) - 1) as f64)
        .collect()
}

/// Savings implied by a network at explicit channel values `(x, r, features)`;
/// the wage is recovered from the rate through the firm conditions.
fn channel_savings(
    ctx: &ExportContext,
    i: AggState,
    j: ProdLevel,
    x: f64,
    r: f64,
    features: &[f64],
) -> Result<f64> {
    let params = &ctx.meta.params;
    let net = ctx.nets.get(i, j);
    let w = params.wage_from_rate(r, params.a[i.idx()])?;
    let (_, dvdx) = net.value_and_grad_x_channels(x, r, features)?;
    let prices = crate::economy::Prices { r, w };
    Ok(params.optimal_consumption(x, dvdx, &prices, j)?.savings)
}

/// Savings of all four networks over an `(x, r)` lattice at a fixed value of
/// the first adaptive feature (default: the per-network median over the
/// sample set). Negative entries mark dissaving regions.
pub fn export_contour(
    ctx: &ExportContext,
    f1_override: Option<f64>,
    n_x: usize,
    n_r: usize,
    out: &Path,
) -> Result<()> {
    let params = &ctx.meta.params;
    let mut meta = base_meta(ctx, "contour");
    let mut rows = Vec::new();
    for i in AggState::ALL {
        let (r_lo, r_hi) = sample_rate_range(ctx, i);
        meta.push(format!(
            "r_range_{}={}..{}",
            i.one_based(),
            fmt_f64(r_lo),
            fmt_f64(r_hi)
        ));
        for j in ProdLevel::ALL {
            let mut features = median_features(ctx, i, j)?;
            if let (Some(v), true) = (f1_override, !features.is_empty()) {
                features[0] = v;
            }
            meta.push(format!(
                "f1_{}_{}={}",
                i.one_based(),
                j.one_based(),
                if features.is_empty() {
                    "none".to_string()
                } else {
                    fmt_f64(features[0])
                }
            ));
            for &x in &lattice(params.x_lo, params.x_hi, n_x) {
                for &r in &lattice(r_lo, r_hi, n_r) {
                    let s = channel_savings(ctx, i, j, x, r, &features)?;
                    rows.push(vec![
                        i.one_based().to_string(),
                        j.one_based().to_string(),
                        fmt_f64(x),
                        fmt_f64(r),
                        fmt_f64(s),
                    ]);
                }
            }
        }
    }
    write_csv(out, &meta, &["i", "j", "x", "r", "savings"], &rows)
}

/// Savings against wealth at the baseline equilibrium measure: slow and fast
/// aggregate states from the networks, plus the baseline policy itself.
pub fn export_policy_slice(ctx: &ExportContext, n_points: usize, out: &Path) -> Result<()> {
    let params = &ctx.meta.params;
    let m_eq = ctx.equilibrium.measure.project_onto(&ctx.grid)?;
    let coeffs = m_eq.coeffs();
    let mut meta = base_meta(ctx, "policy-slice");
    meta.push(format!("baseline_r={}", fmt_f64(ctx.equilibrium.r_star)));
    meta.push(format!("baseline_w={}", fmt_f64(ctx.equilibrium.w_star)));
    let mut rows = Vec::new();
    for j in ProdLevel::ALL {
        for &x in &lattice(params.x_lo, params.x_hi, n_points) {
            let mut row = vec![j.one_based().to_string(), fmt_f64(x)];
            for i in AggState::ALL {
                let prices = params.factor_prices(&m_eq, i)?;
                let s = policy_savings(ctx.nets.get(i, j), x, coeffs, &prices, j, params)?;
                row.push(fmt_f64(s));
            }
            row.push(fmt_f64(ctx.equilibrium.solution.savings_at(x, j)));
            rows.push(row);
        }
    }
    write_csv(
        out,
        &meta,
        &["j", "x", "savings_slow", "savings_fast", "savings_baseline"],
        &rows,
    )
}

/// Savings over a (rate, first-feature) lattice at fixed wealth positions.
pub fn export_feature_surface(
    ctx: &ExportContext,
    xs: &[f64],
    n_r: usize,
    n_f: usize,
    out: &Path,
) -> Result<()> {
    if ctx.meta.net_spec.n_features == 0 {
        return Err(Error::Export(
            "feature-surface requires at least one adaptive feature".into(),
        ));
    }
    let mut meta = base_meta(ctx, "feature-surface");
    let mut rows = Vec::new();
    for i in AggState::ALL {
        let (r_lo, r_hi) = sample_rate_range(ctx, i);
        for j in ProdLevel::ALL {
            let (f_lo, f_hi) = feature_range(ctx, i, j)?;
            meta.push(format!(
                "f1_range_{}_{}={}..{}",
                i.one_based(),
                j.one_based(),
                fmt_f64(f_lo),
                fmt_f64(f_hi)
            ));
            let mut features = median_features(ctx, i, j)?;
            for &x in xs {
                for &r in &lattice(r_lo, r_hi, n_r) {
                    for &f1 in &lattice(f_lo, f_hi, n_f) {
                        features[0] = f1;
                        let s = channel_savings(ctx, i, j, x, r, &features)?;
                        rows.push(vec![
                            i.one_based().to_string(),
                            j.one_based().to_string(),
                            fmt_f64(x),
                            fmt_f64(r),
                            fmt_f64(f1),
                            fmt_f64(s),
                        ]);
                    }
                }
            }
        }
    }
    write_csv(out, &meta, &["i", "j", "x", "r", "f1", "savings"], &rows)
}

/// First adaptive feature against the interest rate over the sample
/// measures, with the Pearson correlation per network in the metadata.
pub fn export_scatter(ctx: &ExportContext, out: &Path) -> Result<()> {
    if ctx.meta.net_spec.n_features == 0 {
        return Err(Error::Export(
            "scatter requires at least one adaptive feature".into(),
        ));
    }
    let mut meta = base_meta(ctx, "scatter");
    let mut rows = Vec::new();
    for i in AggState::ALL {
        for j in ProdLevel::ALL {
            let net = ctx.nets.get(i, j);
            let mut rs = Vec::with_capacity(ctx.samples.samples.len());
            let mut fs = Vec::with_capacity(ctx.samples.samples.len());
            for s in &ctx.samples.samples {
                let r = s.prices[i.idx()].r;
                let f1 = net.features(s.measure.coeffs())?[0];
                rs.push(r);
                fs.push(f1);
                rows.push(vec![
                    i.one_based().to_string(),
                    j.one_based().to_string(),
                    fmt_f64(r),
                    fmt_f64(f1),
                ]);
            }
            meta.push(format!(
                "pearson_{}_{}={}",
                i.one_based(),
                j.one_based(),
                fmt_f64(pearson(&rs, &fs))
            ));
        }
    }
    write_csv(out, &meta, &["i", "j", "r", "f1"], &rows)
}

/// Pearson correlation coefficient.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va.sqrt() * vb.sqrt())
}

/// Parses the `# key=value` metadata lines of an exported CSV.
pub fn read_csv_metadata(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        let Some(rest) = line.strip_prefix("# ") else {
            break;
        };
        if let Some((k, v)) = rest.split_once('=') {
            out.push((k.to_string(), v.to_string()));
        }
    }
    Ok(out)
}

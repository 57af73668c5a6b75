//! Figure-level trend reports rebuilt from the results store.
//!
//! Each figure selects runs by reading their stored configs, groups them by
//! series and x value, and writes a tidy CSV (`series,x,metric,n,mean,stderr`)
//! and a self-contained SVG line plot with ±1 standard-error bars.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use exolam_core::evaluation::metric;
use exolam_core::grid_lam::GridObjective;
use exolam_core::linear_lam::RobustTarget;

use crate::config::{ExperimentConfig, LinearExperiment};
use crate::error::CliError;
use crate::store::{fmt_float, Stat, Store};
use crate::sweep::write_csv;

pub const FIGURES: &[&str] = &["fig2c", "fig3r", "fig4a", "fig4b", "fig5b"];

pub const P_GRID: &[f64] = &[0.0, 0.1, 0.2, 0.3, 0.4, 0.5];
pub const ALPHA_GRID: &[f64] = &[0.0, 0.25, 0.5, 1.0];
pub const SIGMA_GRID: &[f64] = &[0.0, 0.25, 0.5, 1.0];

/// Which objective a linear config trains.
pub fn linear_variant(e: &LinearExperiment) -> &'static str {
    let m = &e.model;
    match (m.lambda_xexo > 0.0, m.lambda_robust > 0.0, m.robust_target) {
        (false, false, _) => "baseline",
        (true, false, _) => "xexo",
        (false, true, RobustTarget::Action) => "action",
        (false, true, RobustTarget::Q) => "q",
        _ => "mixed",
    }
}

pub fn grid_variant(o: GridObjective) -> &'static str {
    match o {
        GridObjective::Vanilla => "vanilla",
        GridObjective::Xexo => "xexo",
        GridObjective::Robust => "robust",
    }
}

/// One plotted point.
#[derive(Clone, Debug, PartialEq)]
pub struct Point {
    pub series: String,
    pub x: f64,
    pub metric: String,
    pub stat: Stat,
}

#[derive(Clone, Debug)]
pub struct Figure {
    pub id: String,
    pub x_label: String,
    pub points: Vec<Point>,
}

/// Per-seed metric values of every stored config.
struct Loaded {
    configs: BTreeMap<String, ExperimentConfig>,
    values: BTreeMap<(String, String), BTreeMap<u64, f64>>,
}

impl Loaded {
    fn from_store(store: &Store) -> Result<Self, CliError> {
        let rows = store.read_runs()?;
        let mut configs = BTreeMap::new();
        let mut values: BTreeMap<(String, String), BTreeMap<u64, f64>> = BTreeMap::new();
        for r in rows.iter().filter(|r| r.ok) {
            if !configs.contains_key(&r.config_hash) {
                configs.insert(r.config_hash.clone(), store.load_config(&r.config_hash)?);
            }
            for (m, v) in &r.metrics {
                values.entry((r.config_hash.clone(), m.clone())).or_default().insert(r.seed, *v);
            }
        }
        Ok(Self { configs, values })
    }

    fn linear(&self) -> impl Iterator<Item = (&String, &LinearExperiment)> {
        self.configs.iter().filter_map(|(h, c)| match c {
            ExperimentConfig::Linear(e) => Some((h, e)),
            _ => None,
        })
    }

    fn seeds(&self, hash: &str, m: &str) -> Option<&BTreeMap<u64, f64>> {
        self.values.get(&(hash.to_string(), m.to_string()))
    }
}

fn stat(v: &BTreeMap<u64, f64>) -> Option<Stat> {
    Stat::of(&v.values().copied().collect::<Vec<_>>())
}

fn fmt_x(x: f64) -> String {
    format!("{x}")
}

fn has_x(points: &[Point], series: &str, x: f64) -> bool {
    points.iter().any(|p| p.series == series && p.x == x)
}

fn missing_grid(points: &[Point], series: &str, axis: &str, grid: &[f64], out: &mut Vec<String>) {
    for &x in grid {
        if !has_x(points, series, x) {
            out.push(format!("({series}: {axis}, {})", fmt_x(x)));
        }
    }
}

pub fn build(store: &Store, id: &str) -> Result<Figure, CliError> {
    let d = Loaded::from_store(store)?;
    let mut missing = Vec::new();
    let fig = match id {
        "fig2c" => {
            let mut pts = Vec::new();
            for (h, e) in d.linear().filter(|(_, e)| linear_variant(e) == "baseline" && e.env.alpha == 0.5) {
                for (m, series) in [(metric::ACTION_NMSE, "action_nmse"), (metric::VAR_XI_PRIME, "var_xi_prime")] {
                    if let Some(s) = d.seeds(h, m).and_then(stat) {
                        pts.push(Point { series: series.into(), x: e.env.p_switch, metric: m.into(), stat: s });
                    }
                }
            }
            missing_grid(&pts, "action_nmse", "p_switch", P_GRID, &mut missing);
            Figure { id: id.into(), x_label: "p_switch".into(), points: pts }
        }
        "fig3r" => {
            let mut pts = Vec::new();
            for (h, e) in d.linear().filter(|(_, e)| linear_variant(e) == "baseline") {
                if let Some(s) = d.seeds(h, metric::ACTION_NMSE).and_then(stat) {
                    pts.push(Point { series: format!("p_switch={}", e.env.p_switch), x: e.env.alpha, metric: metric::ACTION_NMSE.into(), stat: s });
                }
            }
            for p in [0.1, 0.3] {
                missing_grid(&pts, &format!("p_switch={p}"), "alpha", ALPHA_GRID, &mut missing);
            }
            pts.retain(|p| p.series == "p_switch=0.1" || p.series == "p_switch=0.3");
            Figure { id: id.into(), x_label: "alpha".into(), points: pts }
        }
        "fig4a" => {
            // Δ NMSE against the baseline with the same env and seeds.
            let mut pts = Vec::new();
            let base: Vec<(&String, &LinearExperiment)> = d.linear().filter(|(_, e)| linear_variant(e) == "baseline").collect();
            for (h, e) in d.linear().filter(|(_, e)| matches!(linear_variant(e), "xexo" | "action" | "q")) {
                let Some(b) = base.iter().find(|(_, b)| b.env == e.env && b.seeds == e.seeds && b.master_seed == e.master_seed) else {
                    missing.push(format!("(baseline: p_switch, {}; alpha, {})", e.env.p_switch, e.env.alpha));
                    continue;
                };
                let (Some(aux), Some(bv)) = (d.seeds(h, metric::ACTION_NMSE), d.seeds(b.0, metric::ACTION_NMSE)) else { continue };
                let (Some(sa), Some(sb)) = (stat(aux), stat(bv)) else { continue };
                let pooled = (sa.stderr * sa.stderr + sb.stderr * sb.stderr).sqrt();
                pts.push(Point {
                    series: format!("{} alpha={}", linear_variant(e), e.env.alpha),
                    x: e.env.p_switch,
                    metric: "delta_action_nmse".into(),
                    stat: Stat { n: sa.n.min(sb.n), mean: sa.mean - sb.mean, stderr: pooled },
                });
            }
            for v in ["xexo", "action", "q"] {
                if !pts.iter().any(|p| p.series.starts_with(&format!("{v} "))) {
                    missing.push(format!("(objective, {v})"));
                }
            }
            Figure { id: id.into(), x_label: "p_switch".into(), points: pts }
        }
        "fig4b" => {
            let mut pts = Vec::new();
            for (h, e) in d.linear().filter(|(_, e)| e.env.alpha == 0.5 && matches!(linear_variant(e), "baseline" | "action" | "q")) {
                if let Some(s) = d.seeds(h, metric::VAR_XI_PAIR).and_then(stat) {
                    pts.push(Point { series: linear_variant(e).into(), x: e.env.p_switch, metric: metric::VAR_XI_PAIR.into(), stat: s });
                }
            }
            for v in ["baseline", "action"] {
                if !has_x(&pts, v, 0.3) {
                    missing.push(format!("({v}: p_switch, 0.3)"));
                }
            }
            Figure { id: id.into(), x_label: "p_switch".into(), points: pts }
        }
        "fig5b" => {
            let mut pts = Vec::new();
            for (h, c) in &d.configs {
                let ExperimentConfig::Grid(g) = c else { continue };
                let v = grid_variant(g.model.objective);
                for m in [metric::CONSISTENCY_LOSS, metric::EXO_REGION_MSE] {
                    if let Some(s) = d.seeds(h, m).and_then(stat) {
                        pts.push(Point { series: format!("{v} {m}"), x: g.env.sigma, metric: m.into(), stat: s });
                    }
                }
            }
            for v in ["vanilla", "xexo", "robust"] {
                missing_grid(&pts, &format!("{v} {}", metric::CONSISTENCY_LOSS), "sigma", SIGMA_GRID, &mut missing);
            }
            Figure { id: id.into(), x_label: "sigma".into(), points: pts }
        }
        other => return Err(CliError::Usage(format!("unknown figure {other:?}; expected one of {}", FIGURES.join(", ")))),
    };
    if !missing.is_empty() {
        return Err(CliError::Missing(format!("{id} lacks sweep coverage for {}", missing.join(", "))));
    }
    let mut fig = fig;
    fig.points.sort_by(|a, b| a.series.cmp(&b.series).then(a.x.total_cmp(&b.x)));
    Ok(fig)
}

impl Figure {
    pub fn series(&self) -> Vec<String> {
        let mut s: Vec<String> = self.points.iter().map(|p| p.series.clone()).collect();
        s.dedup();
        s
    }

    pub fn series_points(&self, name: &str) -> Vec<&Point> {
        self.points.iter().filter(|p| p.series == name).collect()
    }

    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        self.points
            .iter()
            .map(|p| vec![p.series.clone(), fmt_float(p.x), p.metric.clone(), p.stat.n.to_string(), fmt_float(p.stat.mean), fmt_float(p.stat.stderr)])
            .collect()
    }

    /// Line plot with error bars. Series sharing a metric share the y axis;
    /// figures mixing metrics get one panel per metric.
    pub fn svg(&self) -> String {
        let mut metrics: Vec<String> = self.points.iter().map(|p| p.metric.clone()).collect();
        metrics.sort();
        metrics.dedup();
        let (pw, ph) = (420.0, 300.0);
        let width = pw * metrics.len().max(1) as f64;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{}" font-family="sans-serif" font-size="11">"#,
            ph + 40.0
        );
        let _ = writeln!(s, r#"<text x="10" y="16" font-size="13">{}</text>"#, self.id);
        const COLORS: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];
        let all_series = self.series();
        for (k, m) in metrics.iter().enumerate() {
            let ox = k as f64 * pw;
            let pts: Vec<&Point> = self.points.iter().filter(|p| &p.metric == m).collect();
            let (x0, x1) = bounds(pts.iter().map(|p| p.x));
            let (y0, y1) = bounds(pts.iter().flat_map(|p| [p.stat.mean - p.stat.stderr, p.stat.mean + p.stat.stderr]));
            let (l, r, t, b) = (ox + 60.0, ox + pw - 20.0, 40.0, ph - 10.0);
            let sx = |x: f64| l + (x - x0) / (x1 - x0) * (r - l);
            let sy = |y: f64| b - (y - y0) / (y1 - y0) * (b - t);
            let _ = writeln!(s, r#"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="gray"/>"#, r - l, b - t);
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{} / {m}</text>"#, (l + r) / 2.0, t - 8.0, self.x_label);
            for i in 0..=4 {
                let fx = x0 + (x1 - x0) * i as f64 / 4.0;
                let fy = y0 + (y1 - y0) * i as f64 / 4.0;
                let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, sx(fx), b + 14.0, tick(fx));
                let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, l - 4.0, sy(fy) + 4.0, tick(fy));
            }
            for (si, name) in all_series.iter().enumerate() {
                let sp: Vec<&&Point> = pts.iter().filter(|p| &p.series == name).collect();
                if sp.is_empty() {
                    continue;
                }
                let c = COLORS[si % COLORS.len()];
                let path: Vec<String> = sp.iter().map(|p| format!("{:.1},{:.1}", sx(p.x), sy(p.stat.mean))).collect();
                let _ = writeln!(s, r#"<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
                for p in &sp {
                    let (x, lo, hi) = (sx(p.x), sy(p.stat.mean - p.stat.stderr), sy(p.stat.mean + p.stat.stderr));
                    let _ = writeln!(s, r#"<line x1="{x:.1}" y1="{lo:.1}" x2="{x:.1}" y2="{hi:.1}" stroke="{c}"/>"#);
                    let _ = writeln!(s, r#"<circle cx="{x:.1}" cy="{:.1}" r="2.5" fill="{c}"/>"#, sy(p.stat.mean));
                }
                let ly = t + 14.0 + 13.0 * si as f64;
                let _ = writeln!(s, r#"<text x="{}" y="{ly}" fill="{c}">{name}</text>"#, l + 6.0);
            }
        }
        s.push_str("</svg>\n");
        s
    }
}

fn bounds(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for x in v.filter(|x| x.is_finite()) {
        lo = lo.min(x);
        hi = hi.max(x);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
    }
}

/// Writes `<out>/<id>.csv` and `<out>/<id>.svg`.
pub fn write_report(store: &Store, id: &str, out: &Path) -> Result<(Figure, PathBuf, PathBuf), CliError> {
    let fig = build(store, id)?;
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let csv_path = out.join(format!("{id}.csv"));
    let header: Vec<String> = ["series", "x", "metric", "n", "mean", "stderr"].map(String::from).to_vec();
    write_csv(&csv_path, &header, fig.csv_rows())?;
    let svg_path = out.join(format!("{id}.svg"));
    std::fs::write(&svg_path, fig.svg()).map_err(|e| CliError::io(&svg_path, e))?;
    Ok((fig, csv_path, svg_path))
}

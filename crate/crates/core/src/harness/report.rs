//! SVG figures and the CSV behind each curve, drawn from a metrics bundle.

use log::info;
use plotters::prelude::*;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::MetricsBundle;
use crate::avoidance::DriverType;
use crate::error::{Error, Result};
use crate::predictor::Segment;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportFiles {
    pub files: Vec<PathBuf>,
    /// Figures left out, with the reason.
    pub skipped: Vec<String>,
}

fn report_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Report(e.to_string())
}

/// Sorted values paired with their empirical CDF.
pub fn ecdf(values: &[f64]) -> Vec<(f64, f64)> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.into_iter().enumerate().map(|(i, x)| (x, (i + 1) as f64 / n)).collect()
}

struct Emitter<'a> {
    dir: &'a Path,
    hash: &'a str,
    out: ReportFiles,
}

impl Emitter<'_> {
    fn csv(&mut self, name: &str, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
        let path = self.dir.join(name);
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(f, "# config_hash: {}", self.hash).map_err(|e| Error::io(&path, e))?;
        let mut w = csv::Writer::from_writer(f);
        w.write_record(header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        self.out.files.push(path);
        Ok(())
    }

    fn svg<F>(&mut self, name: &str, draw: F) -> Result<()>
    where
        F: FnOnce(DrawingArea<SVGBackend<'_>, plotters::coord::Shift>) -> Result<()>,
    {
        let mut buf = String::new();
        {
            let root = SVGBackend::with_string(&mut buf, (800, 600)).into_drawing_area();
            root.fill(&WHITE).map_err(report_err)?;
            draw(root.clone())?;
            root.present().map_err(report_err)?;
        }
        let tag = format!("<metadata>config_hash: {}</metadata>", self.hash);
        if let Some(end) = buf.find("<svg").and_then(|i| buf[i..].find('>').map(|j| i + j + 1)) {
            buf.insert_str(end, &tag);
        }
        let path = self.dir.join(name);
        std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
        self.out.files.push(path);
        Ok(())
    }
}

type Series = (String, Vec<(f64, f64)>);

fn line_chart(
    root: DrawingArea<SVGBackend<'_>, plotters::coord::Shift>,
    title: &str,
    x_desc: &str,
    y_desc: &str,
    series: &[Series],
) -> Result<()> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (_, pts) in series {
        for &(x, _) in pts {
            lo = lo.min(x);
            hi = hi.max(x);
        }
    }
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi <= lo {
        hi = lo + 1.0;
    }
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(lo..hi, 0.0..1.0)
        .map_err(report_err)?;
    chart
        .configure_mesh()
        .x_desc(x_desc)
        .y_desc(y_desc)
        .draw()
        .map_err(report_err)?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        // step shape of an empirical CDF
        let mut path = Vec::with_capacity(pts.len() * 2 + 1);
        let mut prev = 0.0;
        for &(x, y) in pts {
            path.push((x, prev));
            path.push((x, y));
            prev = y;
        }
        chart
            .draw_series(LineSeries::new(path, color.stroke_width(2)))
            .map_err(report_err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .position(SeriesLabelPosition::LowerRight)
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(report_err)?;
    Ok(())
}

fn bar_chart(
    root: DrawingArea<SVGBackend<'_>, plotters::coord::Shift>,
    title: &str,
    y_desc: &str,
    bars: &[(String, f64)],
) -> Result<()> {
    let top = bars.iter().map(|b| b.1).fold(0.0f64, f64::max).max(1e-9) * 1.1;
    let n = bars.len().max(1);
    let labels: Vec<String> = bars.iter().map(|b| b.0.clone()).collect();
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(15)
        .x_label_area_size(60)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..n as f64, 0.0..top)
        .map_err(report_err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n * 2 + 1)
        .x_label_formatter(&|x| {
            let k = x.floor() as usize;
            if (x - k as f64 - 0.5).abs() < 0.26 {
                labels.get(k).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .y_desc(y_desc)
        .draw()
        .map_err(report_err)?;
    chart
        .draw_series(bars.iter().enumerate().map(|(i, (_, v))| {
            Rectangle::new([(i as f64 + 0.1, 0.0), (i as f64 + 0.9, *v)], Palette99::pick(0).filled())
        }))
        .map_err(report_err)?;
    Ok(())
}

fn num(x: f64) -> String {
    x.to_string()
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn seconds(step: usize, tick: f64) -> String {
    format!("t+{}s", (step as f64 * tick * 10.0).round() / 10.0)
}

/// Write every figure the bundle has data for into `dir`.
pub fn render_reports(bundle: &MetricsBundle, dir: &Path) -> Result<ReportFiles> {
    if bundle.is_empty() {
        return Err(Error::Report("metrics bundle is empty".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut em = Emitter {
        dir,
        hash: &bundle.config_hash,
        out: ReportFiles::default(),
    };
    let tick = 0.1;

    if let Some(err) = &bundle.errors {
        for seg in Segment::ALL {
            let mut series: Vec<Series> = Vec::new();
            let mut rows = Vec::new();
            for (source, rep) in [("model", &err.model), ("kalman", &err.kalman)] {
                let Some(se) = rep.segments.get(&seg) else { continue };
                for (k, &step) in rep.steps.iter().enumerate() {
                    let curve = ecdf(&se.errors[k]);
                    for &(x, y) in &curve {
                        rows.push(vec![source.into(), step.to_string(), num(x), num(y)]);
                    }
                    series.push((format!("{source} {}", seconds(step, tick)), curve));
                }
            }
            if rows.is_empty() {
                continue;
            }
            let stem = format!("error_cdf_{}", seg.name());
            em.csv(&format!("{stem}.csv"), &["source", "step", "error_m", "cdf"], rows)?;
            em.svg(&format!("{stem}.svg"), |root| {
                line_chart(root, &format!("Displacement error CDF ({})", seg.name()), "error (m)", "CDF", &series)
            })?;
        }
    } else {
        em.out.skipped.push("error CDFs: no predictor errors".into());
    }

    if let Some(cov) = &bundle.coverage {
        let mut rows = Vec::new();
        for (axis, c) in [("lat", &cov.lat), ("lon", &cov.lon)] {
            for (k, &step) in cov.steps.iter().enumerate() {
                rows.push(vec![
                    axis.into(),
                    step.to_string(),
                    num(c.below_lower[k]),
                    num(c.below_upper[k]),
                    num(c.between[k]),
                ]);
            }
        }
        em.csv("coverage.csv", &["axis", "step", "below_lower", "below_upper", "between"], rows)?;
    }

    for (method, m) in &bundle.detection {
        let curve = ecdf(&m.reaction_times);
        let rows = curve.iter().map(|&(x, y)| vec![num(x), num(y)]).collect();
        let stem = format!("reaction_time_cdf_{method}");
        em.csv(&format!("{stem}.csv"), &["reaction_time_s", "cdf"], rows)?;
        let series = vec![(method.clone(), curve)];
        em.svg(&format!("{stem}.svg"), |root| {
            line_chart(root, &format!("Available reaction time ({method})"), "seconds before collision", "CDF", &series)
        })?;
    }
    if !bundle.detection.is_empty() {
        let rows = bundle
            .detection
            .iter()
            .map(|(method, m)| {
                let mut r = vec![
                    method.clone(),
                    m.true_positives.to_string(),
                    m.false_positives.to_string(),
                    m.false_negatives.to_string(),
                ];
                r.extend(m.fp_histogram.iter().map(|c| c.to_string()));
                r
            })
            .collect();
        em.csv(
            "detection.csv",
            &["method", "tp", "fp", "fn", "fp_0_5m", "fp_5_10m", "fp_10_15m", "fp_15m_plus"],
            rows,
        )?;
    }

    if let Some(imp) = &bundle.importance {
        let bars: Vec<(String, f64)> = imp.grouped.iter().map(|(k, v)| (k.clone(), *v)).collect();
        em.csv("importance.csv", &["feature", "importance"], bars.iter().map(|(k, v)| vec![k.clone(), num(*v)]).collect())?;
        em.svg("importance.svg", |root| bar_chart(root, "Feature importance", "mean impurity decrease", &bars))?;
    } else {
        em.out.skipped.push("importance: no forest".into());
    }

    if let Some(snap) = &bundle.snapshot {
        let mut rows = Vec::new();
        for v in &snap.vehicles {
            for (kind, pts) in [("history", &v.history), ("truth", &v.truth), ("predicted", &v.predicted)] {
                for (j, p) in pts.iter().enumerate() {
                    rows.push(vec![v.id.to_string(), kind.into(), j.to_string(), num(p[0]), num(p[1]), String::new(), String::new()]);
                }
            }
            for (j, (p, w)) in v.predicted.iter().zip(&v.interval_widths).enumerate() {
                rows.push(vec![v.id.to_string(), "ellipse".into(), j.to_string(), num(p[0]), num(p[1]), num(w[0]), num(w[1])]);
            }
        }
        em.csv("snapshot.csv", &["vehicle", "kind", "index", "y_m", "x_m", "width_lat_m", "width_lon_m"], rows)?;
        em.svg("snapshot.svg", |root| draw_snapshot(root, snap))?;
    } else {
        em.out.skipped.push("snapshot: no alarm on a colliding pair".into());
    }

    match &bundle.avoidance {
        Some(av) => {
            let mut rows = Vec::new();
            let mut bars = Vec::new();
            for c in &av.cells {
                let driver = match c.driver {
                    DriverType::Human => "human",
                    DriverType::Automated => "automated",
                };
                rows.push(vec![
                    num(c.decel),
                    driver.into(),
                    c.cases.to_string(),
                    c.detected.to_string(),
                    c.avoided.to_string(),
                    num(c.avoided_fraction),
                    opt(c.avoided_fraction_detected),
                    opt(c.mean_speed_reduction),
                ]);
                bars.push((format!("{driver} {} m/s²", c.decel), c.avoided_fraction));
            }
            em.csv(
                "avoidance.csv",
                &[
                    "decel_mps2",
                    "driver",
                    "cases",
                    "detected",
                    "avoided",
                    "avoided_fraction",
                    "avoided_fraction_detected",
                    "mean_speed_reduction",
                ],
                rows,
            )?;
            em.svg("avoidance.svg", |root| bar_chart(root, "Collisions avoided", "fraction", &bars))?;
        }
        None => {
            info!("no avoidance data in the bundle; skipping avoidance figures");
            em.out.skipped.push("avoidance: no data".into());
        }
    }
    Ok(em.out)
}

fn ellipse(cx: f64, cy: f64, a: f64, b: f64) -> Vec<(f64, f64)> {
    (0..=36)
        .map(|k| {
            let t = k as f64 / 36.0 * std::f64::consts::TAU;
            (cx + a * t.cos(), cy + b * t.sin())
        })
        .collect()
}

fn draw_snapshot(root: DrawingArea<SVGBackend<'_>, plotters::coord::Shift>, snap: &super::Snapshot) -> Result<()> {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for v in &snap.vehicles {
        for p in v.history.iter().chain(&v.truth).chain(&v.predicted) {
            x0 = x0.min(p[1]);
            x1 = x1.max(p[1]);
            y0 = y0.min(p[0]);
            y1 = y1.max(p[0]);
        }
        for (p, w) in v.predicted.iter().zip(&v.interval_widths) {
            x0 = x0.min(p[1] - w[1] / 2.0);
            x1 = x1.max(p[1] + w[1] / 2.0);
            y0 = y0.min(p[0] - w[0] / 2.0);
            y1 = y1.max(p[0] + w[0] / 2.0);
        }
    }
    if !x0.is_finite() {
        return Err(Error::Report("snapshot has no points".into()));
    }
    let span = (x1 - x0).max(y1 - y0).max(1.0) * 1.1;
    let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("Alarm at t = {} s", snap.time), ("sans-serif", 22))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(cx - span / 2.0..cx + span / 2.0, cy - span / 2.0..cy + span / 2.0)
        .map_err(report_err)?;
    chart.configure_mesh().x_desc("x (m)").y_desc("y (m)").draw().map_err(report_err)?;
    for (i, v) in snap.vehicles.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let xy = |p: &[f64; 2]| (p[1], p[0]);
        chart
            .draw_series(LineSeries::new(v.history.iter().map(xy), color.stroke_width(2)))
            .map_err(report_err)?
            .label(format!("vehicle {}", v.id))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        chart
            .draw_series(LineSeries::new(v.truth.iter().map(xy), color.mix(0.4).stroke_width(1)))
            .map_err(report_err)?;
        chart
            .draw_series(v.predicted.iter().map(|p| Circle::new(xy(p), 2, color.filled())))
            .map_err(report_err)?;
        chart
            .draw_series(
                v.predicted
                    .iter()
                    .zip(&v.interval_widths)
                    .map(|(p, w)| PathElement::new(ellipse(p[1], p[0], w[1] / 2.0, w[0] / 2.0), color.mix(0.5))),
            )
            .map_err(report_err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(report_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::{DetectionMetrics, Method};
    use crate::harness::{Snapshot, SnapshotVehicle};
    use crate::world::VehicleId;

    fn metrics(times: Vec<f64>) -> DetectionMetrics {
        DetectionMetrics {
            method: Method::RandomForest,
            true_positives: times.len(),
            false_positives: 0,
            false_negatives: 0,
            reaction_times: times,
            detected: Vec::new(),
            missed: Vec::new(),
            false_alarms: Vec::new(),
            fp_histogram: [0; 4],
        }
    }

    fn read_rows(path: &Path) -> Vec<csv::StringRecord> {
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).unwrap();
        r.records().map(|x| x.unwrap()).collect()
    }

    #[test]
    fn empty_bundle_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let b = MetricsBundle::default();
        assert!(matches!(render_reports(&b, dir.path()), Err(Error::Report(_))));
    }

    #[test]
    fn one_detection_run_gives_one_cdf_and_csv() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = MetricsBundle {
            config_hash: "abc".into(),
            ..Default::default()
        };
        let times = vec![3.1, 2.4000000000000004, 5.0, 0.30000000000000004];
        b.detection.insert("random_forest".into(), metrics(times.clone()));
        let out = render_reports(&b, dir.path()).unwrap();
        let cdf: Vec<_> = out.files.iter().filter(|p| p.to_string_lossy().contains("reaction_time_cdf")).collect();
        assert_eq!(cdf.len(), 2);
        assert!(out.skipped.iter().any(|s| s.starts_with("avoidance")));
        let rows = read_rows(&dir.path().join("reaction_time_cdf_random_forest.csv"));
        let mut sorted = times.clone();
        sorted.sort_by(f64::total_cmp);
        let got: Vec<f64> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
        assert_eq!(got, sorted);
        let svg = std::fs::read_to_string(dir.path().join("reaction_time_cdf_random_forest.svg")).unwrap();
        assert!(svg.contains("config_hash: abc"));
        let raw = std::fs::read_to_string(dir.path().join("reaction_time_cdf_random_forest.csv")).unwrap();
        assert!(raw.starts_with("# config_hash: abc"));
    }

    #[test]
    fn snapshot_draws_one_ellipse_per_step() {
        let dir = tempfile::tempdir().unwrap();
        let vehicle = |id: u32, x: f64| SnapshotVehicle {
            id: VehicleId(id),
            history: (0..30).map(|i| [i as f64, x]).collect(),
            truth: (30..60).map(|i| [i as f64, x]).collect(),
            predicted: (30..60).map(|i| [i as f64, x + 0.1]).collect(),
            interval_widths: (0..30).map(|j| [0.2 + j as f64 * 0.1, 0.3]).collect(),
        };
        let b = MetricsBundle {
            config_hash: "h".into(),
            snapshot: Some(Snapshot {
                method: Method::RandomForest,
                tick: 30,
                time: 3.0,
                vehicles: vec![vehicle(1, 0.0), vehicle(2, 10.0)],
            }),
            ..Default::default()
        };
        render_reports(&b, dir.path()).unwrap();
        let rows = read_rows(&dir.path().join("snapshot.csv"));
        for id in ["1", "2"] {
            let n = rows.iter().filter(|r| &r[0] == id && &r[1] == "ellipse").count();
            assert_eq!(n, 30);
        }
        let svg = std::fs::read_to_string(dir.path().join("snapshot.svg")).unwrap();
        assert!(svg.matches("<polyline").count() >= 60);
    }

    #[test]
    fn ecdf_ends_at_one() {
        let c = ecdf(&[3.0, 1.0, 2.0]);
        assert_eq!(c, vec![(1.0, 1.0 / 3.0), (2.0, 2.0 / 3.0), (3.0, 1.0)]);
    }
}

//! Run artifacts: CSV tables, self-contained SVG charts, and a manifest
//! that fingerprints the configuration and outputs of a run.
//!
//! Floats are written with Rust's shortest round-trip formatting, so
//! parsing a written value recovers the exact f64. Nothing here depends on
//! wall-clock time; identical inputs produce byte-identical artifacts.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::train::{EpochLog, MetricsRecord};

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn csv_row(fields: &[String]) -> String {
    fields.iter().map(|f| csv_field(f)).collect::<Vec<_>>().join(",")
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(
        "mode,seed,beta,rmse_all,rmse_v,rmse_theta_deg,l_pf,trainable_params,p_reduced,r_ret\n",
    );
    for r in records {
        out.push_str(&csv_row(&[
            r.mode.clone(),
            r.seed.to_string(),
            r.beta.to_string(),
            r.rmse_all.to_string(),
            r.rmse_v.to_string(),
            r.rmse_theta_deg.to_string(),
            r.l_pf.to_string(),
            r.trainable_params.to_string(),
            r.p_reduced.to_string(),
            r.r_ret.to_string(),
        ]));
        out.push('\n');
    }
    out
}

/// Parses a table written by [`metrics_csv`]. Fields are never quoted in
/// practice (mode names are fixed tokens), so a plain comma split suffices.
pub fn metrics_from_csv(text: &str) -> crate::Result<Vec<MetricsRecord>> {
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, l)| l).unwrap_or("");
    if header
        != "mode,seed,beta,rmse_all,rmse_v,rmse_theta_deg,l_pf,trainable_params,p_reduced,r_ret"
    {
        return Err(crate::Error::Config(format!("unrecognized metrics header: '{header}'")));
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = |what: &str| {
            crate::Error::Config(format!("metrics line {}: bad {what}: '{line}'", i + 1))
        };
        if f.len() != 10 {
            return Err(bad("field count"));
        }
        out.push(MetricsRecord {
            mode: f[0].to_string(),
            seed: f[1].parse().map_err(|_| bad("seed"))?,
            beta: f[2].parse().map_err(|_| bad("beta"))?,
            rmse_all: f[3].parse().map_err(|_| bad("rmse_all"))?,
            rmse_v: f[4].parse().map_err(|_| bad("rmse_v"))?,
            rmse_theta_deg: f[5].parse().map_err(|_| bad("rmse_theta_deg"))?,
            l_pf: f[6].parse().map_err(|_| bad("l_pf"))?,
            trainable_params: f[7].parse().map_err(|_| bad("trainable_params"))?,
            p_reduced: f[8].parse().map_err(|_| bad("p_reduced"))?,
            r_ret: f[9].parse().map_err(|_| bad("r_ret"))?,
        });
    }
    Ok(out)
}

pub fn history_from_csv(text: &str) -> crate::Result<Vec<EpochLog>> {
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, l)| l).unwrap_or("");
    if header != "epoch,lr,loss_data,loss_pf,val_rmse" {
        return Err(crate::Error::Config(format!("unrecognized history header: '{header}'")));
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad =
            || crate::Error::Config(format!("history line {}: malformed: '{line}'", i + 1));
        if f.len() != 5 {
            return Err(bad());
        }
        out.push(EpochLog {
            epoch: f[0].parse().map_err(|_| bad())?,
            lr: f[1].parse().map_err(|_| bad())?,
            loss_data: f[2].parse().map_err(|_| bad())?,
            loss_pf: f[3].parse().map_err(|_| bad())?,
            val_rmse: f[4].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

pub fn history_csv(epochs: &[EpochLog]) -> String {
    let mut out = String::from("epoch,lr,loss_data,loss_pf,val_rmse\n");
    for e in epochs {
        out.push_str(&csv_row(&[
            e.epoch.to_string(),
            e.lr.to_string(),
            e.loss_data.to_string(),
            e.loss_pf.to_string(),
            e.val_rmse.to_string(),
        ]));
        out.push('\n');
    }
    out
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
const CHART_W: f64 = 640.0;
const CHART_H: f64 = 400.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;

struct Scale {
    min: f64,
    max: f64,
    log: bool,
}

impl Scale {
    fn fit(values: impl Iterator<Item = f64>, log: bool) -> Scale {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for v in values {
            if log && v <= 0.0 {
                continue;
            }
            min = min.min(v);
            max = max.max(v);
        }
        if !min.is_finite() || !max.is_finite() {
            min = 0.0;
            max = 1.0;
        }
        if min == max {
            // Degenerate span: widen symmetrically so the point is centered.
            if log {
                min /= 2.0;
                max *= 2.0;
            } else {
                min -= 0.5;
                max += 0.5;
            }
        }
        Scale { min, max, log }
    }

    fn project(&self, v: f64, lo_px: f64, hi_px: f64) -> f64 {
        let (v, min, max) = if self.log {
            (v.max(self.min).log10(), self.min.log10(), self.max.log10())
        } else {
            (v, self.min, self.max)
        };
        lo_px + (v - min) / (max - min) * (hi_px - lo_px)
    }

    fn ticks(&self) -> Vec<f64> {
        let k = 4;
        (0..=k)
            .map(|i| {
                let f = i as f64 / k as f64;
                if self.log {
                    10f64.powf(self.min.log10() + f * (self.max.log10() - self.min.log10()))
                } else {
                    self.min + f * (self.max - self.min)
                }
            })
            .collect()
    }
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1000.0 || v.abs() < 0.01 {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
    }
}

/// One named polyline.
pub struct Series<'a> {
    pub label: &'a str,
    pub points: Vec<(f64, f64)>,
}

/// Multi-series line chart. `log_y` switches the y axis to log10; points
/// with non-positive y are clamped to the axis minimum in that mode.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series<'_>],
    log_y: bool,
) -> String {
    let xs = Scale::fit(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)), false);
    let ys = Scale::fit(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)), log_y);
    let (x0, x1) = (MARGIN_L, CHART_W - MARGIN_R);
    let (y0, y1) = (CHART_H - MARGIN_B, MARGIN_T);
    let mut svg = chart_frame(title, x_label, y_label, &xs, &ys);
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| {
                format!("{:.2},{:.2}", xs.project(x, x0, x1), ys.project(y, y0, y1))
            })
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        let ly = MARGIN_T + 18.0 * si as f64;
        svg.push_str(&format!(
            "<rect x=\"{:.1}\" y=\"{ly:.1}\" width=\"12\" height=\"12\" fill=\"{color}\"/>\n",
            CHART_W - MARGIN_R + 12.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\">{}</text>\n",
            CHART_W - MARGIN_R + 30.0,
            ly + 10.0,
            xml_escape(s.label)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Scatter chart with point labels; indices in `front` are joined by a
/// dashed line (drawn in the given order).
pub fn scatter_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    points: &[(f64, f64, String)],
    front: &[usize],
) -> String {
    let xs = Scale::fit(points.iter().map(|p| p.0), false);
    let ys = Scale::fit(points.iter().map(|p| p.1), false);
    let (x0, x1) = (MARGIN_L, CHART_W - MARGIN_R);
    let (y0, y1) = (CHART_H - MARGIN_B, MARGIN_T);
    let mut svg = chart_frame(title, x_label, y_label, &xs, &ys);
    if front.len() > 1 {
        let pts: Vec<String> = front
            .iter()
            .map(|&i| {
                format!(
                    "{:.2},{:.2}",
                    xs.project(points[i].0, x0, x1),
                    ys.project(points[i].1, y0, y1)
                )
            })
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"#999\" stroke-dasharray=\"5,4\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
    }
    for (pi, (x, y, label)) in points.iter().enumerate() {
        let px = xs.project(*x, x0, x1);
        let py = ys.project(*y, y0, y1);
        let color = PALETTE[pi % PALETTE.len()];
        svg.push_str(&format!("<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"5\" fill=\"{color}\"/>\n"));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\">{}</text>\n",
            px + 8.0,
            py - 6.0,
            xml_escape(label)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn chart_frame(title: &str, x_label: &str, y_label: &str, xs: &Scale, ys: &Scale) -> String {
    let (x0, x1) = (MARGIN_L, CHART_W - MARGIN_R);
    let (y0, y1) = (CHART_H - MARGIN_B, MARGIN_T);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {CHART_W} {CHART_H}\" \
         font-family=\"sans-serif\">\n<rect width=\"{CHART_W}\" height=\"{CHART_H}\" \
         fill=\"white\"/>\n"
    );
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        (x0 + x1) / 2.0,
        xml_escape(title)
    ));
    for t in xs.ticks() {
        let px = xs.project(t, x0, x1);
        svg.push_str(&format!(
            "<line x1=\"{px:.2}\" y1=\"{y0}\" x2=\"{px:.2}\" y2=\"{}\" stroke=\"#ddd\"/>\n",
            y0 + 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{px:.2}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"11\">{}</text>\n",
            y0 + 20.0,
            fmt_tick(t)
        ));
    }
    for t in ys.ticks() {
        let py = ys.project(t, y0, y1);
        svg.push_str(&format!(
            "<line x1=\"{x0}\" y1=\"{py:.2}\" x2=\"{x1}\" y2=\"{py:.2}\" stroke=\"#eee\"/>\n"
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.2}\" text-anchor=\"end\" font-size=\"11\">{}</text>\n",
            x0 - 6.0,
            py + 4.0,
            fmt_tick(t)
        ));
    }
    svg.push_str(&format!(
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n",
        (x0 + x1) / 2.0,
        CHART_H - 10.0,
        xml_escape(x_label)
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{:.1}\" font-size=\"13\" transform=\"rotate(-90 16 {:.1})\" \
         text-anchor=\"middle\">{}</text>\n",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        xml_escape(y_label)
    ));
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct ArtifactEntry {
    pub name: String,
    pub sha256: String,
    pub bytes: usize,
}

/// Fingerprint of one run: package version, hash of the serialized
/// configuration, and hashes of every produced artifact. Contains no
/// timestamps, so reruns of the same configuration produce the same
/// manifest.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub version: String,
    pub config_sha256: String,
    pub artifacts: Vec<ArtifactEntry>,
}

pub fn manifest(config_json: &str, artifacts: &[(String, Vec<u8>)]) -> Manifest {
    Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256: sha256_hex(config_json.as_bytes()),
        artifacts: artifacts
            .iter()
            .map(|(name, data)| ArtifactEntry {
                name: name.clone(),
                sha256: sha256_hex(data),
                bytes: data.len(),
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(mode: &str, rmse: f64) -> MetricsRecord {
        MetricsRecord {
            mode: mode.into(),
            seed: 0,
            beta: 1.0,
            rmse_all: rmse,
            rmse_v: rmse / 2.0,
            rmse_theta_deg: rmse * 3.0,
            l_pf: 0.25,
            trainable_params: 768,
            p_reduced: 0.125,
            r_ret: 1.0,
        }
    }

    #[test]
    fn metrics_csv_round_trips_floats() {
        let awkward = 0.1 + 0.2;
        let csv = metrics_csv(&[record("lora_only", awkward)]);
        let line = csv.lines().nth(1).unwrap();
        let rmse_field: f64 = line.split(',').nth(3).unwrap().parse().unwrap();
        assert_eq!(rmse_field, awkward);
    }

    #[test]
    fn metrics_csv_layout() {
        let csv = metrics_csv(&[record("full_ft", 0.5)]);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "mode,seed,beta,rmse_all,rmse_v,rmse_theta_deg,l_pf,trainable_params,p_reduced,r_ret"
        );
        assert_eq!(lines.next().unwrap(), "full_ft,0,1,0.5,0.25,1.5,0.25,768,0.125,1");
        assert!(lines.next().is_none());
    }

    #[test]
    fn metrics_csv_parses_back_exactly() {
        let records = vec![record("zero_shot", 0.1 + 0.2), record("lora_phead", 1.0 / 3.0)];
        let parsed = metrics_from_csv(&metrics_csv(&records)).unwrap();
        assert_eq!(parsed.len(), 2);
        for (a, b) in records.iter().zip(&parsed) {
            assert_eq!(a.mode, b.mode);
            assert_eq!(a.rmse_all, b.rmse_all);
            assert_eq!(a.p_reduced, b.p_reduced);
        }
        assert!(metrics_from_csv("wrong,header\n").is_err());
        assert!(metrics_from_csv(
            "mode,seed,beta,rmse_all,rmse_v,rmse_theta_deg,l_pf,trainable_params,p_reduced,r_ret\nx,y\n"
        )
        .is_err());
    }

    #[test]
    fn history_csv_parses_back_exactly() {
        let rows = vec![EpochLog {
            epoch: 3,
            lr: 7.25e-5,
            loss_data: 0.125,
            loss_pf: 2.5,
            val_rmse: 0.0625,
        }];
        let parsed = history_from_csv(&history_csv(&rows)).unwrap();
        assert_eq!(parsed[0].epoch, 3);
        assert_eq!(parsed[0].lr, 7.25e-5);
        assert_eq!(parsed[0].val_rmse, 0.0625);
    }

    #[test]
    fn csv_quoting() {
        assert_eq!(csv_field("plain"), "plain");
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
    }

    #[test]
    fn history_csv_has_one_row_per_epoch() {
        let rows = vec![
            EpochLog { epoch: 0, lr: 1e-4, loss_data: 1.0, loss_pf: 2.0, val_rmse: 0.3 },
            EpochLog { epoch: 1, lr: 9e-5, loss_data: 0.8, loss_pf: 1.5, val_rmse: 0.2 },
        ];
        let csv = history_csv(&rows);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(2).unwrap().starts_with("1,0.00009,"));
    }

    #[test]
    fn line_chart_is_deterministic_and_well_formed() {
        let series = [
            Series { label: "train", points: vec![(0.0, 1.0), (1.0, 0.5), (2.0, 0.25)] },
            Series { label: "val", points: vec![(0.0, 1.2), (1.0, 0.7), (2.0, 0.4)] },
        ];
        let a = line_chart("loss", "epoch", "loss", &series, true);
        let b = line_chart("loss", "epoch", "loss", &series, true);
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert!(a.trim_end().ends_with("</svg>"));
        assert_eq!(a.matches("<polyline").count(), 2);
        assert!(a.contains("train") && a.contains("val"));
        assert!(!a.contains("NaN"));
    }

    #[test]
    fn scatter_chart_draws_front() {
        let pts = vec![
            (0.06, 0.05, "lora_only".to_string()),
            (1.0, 0.03, "full_ft".to_string()),
            (0.2, 0.04, "lora_phead".to_string()),
        ];
        let svg = scatter_chart("tradeoff", "trainable fraction", "rmse", &pts, &[0, 2, 1]);
        assert_eq!(svg.matches("<circle").count(), 3);
        assert!(svg.contains("stroke-dasharray"));
        assert!(svg.contains("lora_phead"));
    }

    #[test]
    fn chart_handles_degenerate_ranges() {
        let series = [Series { label: "flat", points: vec![(0.0, 2.0), (1.0, 2.0)] }];
        let svg = line_chart("flat", "x", "y", &series, false);
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }

    #[test]
    fn manifest_hashes_are_stable() {
        // SHA-256 of "abc" is a published test vector.
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        let m1 = manifest("{\"seed\":1}", &[("metrics.csv".into(), b"a,b\n".to_vec())]);
        let m2 = manifest("{\"seed\":1}", &[("metrics.csv".into(), b"a,b\n".to_vec())]);
        assert_eq!(serde_json::to_string(&m1).unwrap(), serde_json::to_string(&m2).unwrap());
        assert_ne!(m1.config_sha256, manifest("{\"seed\":2}", &[]).config_sha256);
        assert_eq!(m1.artifacts[0].bytes, 4);
    }
}

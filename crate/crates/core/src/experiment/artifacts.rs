//! On-disk outputs of a campaign: CSV tables, optional PNG heatmaps and a
//! JSON manifest. Nothing time- or host-dependent is written, so a rerun
//! with the same configuration reproduces every file byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::campaign::{CampaignResult, WindowFields};
use super::config::CampaignConfig;
use super::seeds::{Seeds, Stream};
use crate::error::{Error, Result};

/// Creates `dir` if needed and checks that files can be written there.
pub fn prepare_output_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(".write-probe");
    fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
    fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))?;
    Ok(())
}

pub fn config_hash(cfg: &CampaignConfig) -> String {
    hex::encode(Sha256::digest(cfg.to_json().as_bytes()))
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedEntry {
    pub stream: Stream,
    pub root: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub scenario: super::config::Scenario,
    pub mode: crate::bed_design::DesignMode,
    pub stages: usize,
    pub master_seed: u64,
    pub seeds: Vec<SeedEntry>,
    pub config_sha256: String,
    pub final_map: Option<(f64, f64)>,
    pub final_estimate: Option<(f64, f64)>,
    pub final_params: Vec<f64>,
    pub files: Vec<FileEntry>,
}

struct Out {
    dir: PathBuf,
    files: Vec<FileEntry>,
}

impl Out {
    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.files.push(FileEntry {
            path: name.to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
        });
        Ok(())
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        self.put(name, &bytes)
    }
}

fn f(x: f64) -> String {
    format!("{x:?}")
}

fn opt(x: Option<f64>) -> String {
    x.map(f).unwrap_or_default()
}

fn flag(b: bool) -> String {
    (b as u8).to_string()
}

fn fields_rows(fields: &WindowFields) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header = vec!["x".to_string(), "y".to_string()];
    header.extend(fields.columns.iter().map(|(n, _)| n.clone()));
    let rows = fields
        .coords
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| {
            let mut r = vec![f(x), f(y)];
            r.extend(fields.columns.iter().map(|(_, c)| f(c[i])));
            r
        })
        .collect();
    (header, rows)
}

/// Writes every table of `result` into `dir` and returns the manifest
/// (also written, as `manifest.json`).
pub fn write_artifacts(dir: &Path, cfg: &CampaignConfig, result: &CampaignResult) -> Result<Manifest> {
    prepare_output_dir(dir)?;
    let mut out = Out {
        dir: dir.to_path_buf(),
        files: Vec::new(),
    };
    out.put("config.json", cfg.to_json().as_bytes())?;

    let mut stages = Vec::new();
    let mut scores = Vec::new();
    let mut losses = Vec::new();
    let mut eki = Vec::new();
    let mut params = Vec::new();
    for r in &result.records {
        let ind = r.indicator.as_ref();
        stages.push(vec![
            r.stage.to_string(),
            f(r.design.d_x),
            f(r.design.d_y),
            f(r.design.d_t),
            f(r.measurement.value),
            f(r.map.0),
            f(r.map.1),
            f(r.estimate.0),
            f(r.estimate.1),
            opt(ind.and_then(|i| i.trajectory.last().copied())),
            opt(ind.map(|i| i.threshold)),
            ind.map(|i| flag(i.accept)).unwrap_or_default(),
            flag(r.training.is_some()),
        ]);
        for (i, c) in r.candidates.iter().enumerate() {
            scores.push(vec![
                r.stage.to_string(),
                i.to_string(),
                f(c.design.d_x),
                f(c.design.d_y),
                f(c.design.d_t),
                f(c.score),
                opt(c.measurement),
                opt(c.kld),
                flag(i == r.chosen),
            ]);
        }
        if let Some(t) = &r.training {
            for e in &t.trace {
                losses.push(vec![
                    r.stage.to_string(),
                    e.iteration.to_string(),
                    f(e.objective),
                    f(e.param_norm),
                    opt(e.scalar),
                ]);
            }
        }
        if let Some(i) = ind {
            for (k, v) in i.trajectory.iter().enumerate() {
                eki.push(vec![
                    r.stage.to_string(),
                    k.to_string(),
                    f(*v),
                    flag(i.accept),
                ]);
            }
        }
        for (k, p) in r.params.iter().enumerate() {
            params.push(vec![r.stage.to_string(), k.to_string(), f(*p)]);
        }

        let mut buf = Vec::new();
        r.posterior.write_csv(&mut buf)?;
        out.put(&format!("posterior_stage_{}.csv", r.stage), &buf)?;
        #[cfg(feature = "png")]
        if cfg.write_png {
            let g = r.posterior.grid();
            let png = heatmap_png(r.posterior.mass(), g.xs().len(), g.ys().len())?;
            out.put(&format!("posterior_stage_{}.png", r.stage), &png)?;
        }
    }
    out.csv(
        "stages.csv",
        &[
            "stage", "design_x", "design_y", "design_t", "measurement", "map_x", "map_y",
            "estimate_x", "estimate_y", "kld", "threshold", "accepted_flag", "trained_flag",
        ],
        stages,
    )?;
    out.csv(
        "scores.csv",
        &[
            "stage", "candidate", "candidate_x", "candidate_y", "candidate_t", "score",
            "measurement", "kld", "chosen_flag",
        ],
        scores,
    )?;
    out.csv(
        "loss_trace.csv",
        &["stage", "iteration", "objective", "param_norm", "theta_s"],
        losses,
    )?;
    out.csv("eki.csv", &["stage", "eki_iteration", "kld", "accepted_flag"], eki)?;
    out.csv("params.csv", &["stage", "index", "value"], params)?;

    let mut metrics = Vec::new();
    if let Some(fm) = &result.final_metrics {
        for (name, m) in [("corrected", fm.corrected), ("baseline", fm.baseline)] {
            metrics.push(vec!["final".into(), name.into(), f(fm.time), f(m.mse), f(m.re)]);
        }
        let (h, rows) = fields_rows(&fm.fields);
        let h: Vec<&str> = h.iter().map(String::as_str).collect();
        out.csv("fields_final.csv", &h, rows)?;
        #[cfg(feature = "png")]
        if cfg.write_png {
            field_pngs(&mut out, "field_final", &fm.fields)?;
        }
    }
    if let Some(c) = &result.comparison {
        let t = cfg.constraint.stage_time(cfg.stages);
        for (name, m) in [
            ("baseline", c.baseline),
            ("informative", c.informative),
            ("uninformative", c.uninformative),
        ] {
            metrics.push(vec!["comparison".into(), name.into(), f(t), f(m.mse), f(m.re)]);
        }
        let (h, rows) = fields_rows(&c.fields);
        let h: Vec<&str> = h.iter().map(String::as_str).collect();
        out.csv("fields_comparison.csv", &h, rows)?;
        #[cfg(feature = "png")]
        if cfg.write_png {
            field_pngs(&mut out, "field_comparison", &c.fields)?;
        }
        let n = c.winner_trajectory.len().max(c.alternative_trajectory.len());
        let rows = (0..n)
            .map(|k| {
                vec![
                    c.stage.to_string(),
                    k.to_string(),
                    opt(c.informative_trajectory().get(k).copied()),
                    opt(c.uninformative_trajectory().get(k).copied()),
                ]
            })
            .collect();
        out.csv(
            "comparison_eki.csv",
            &["stage", "eki_iteration", "kld_informative", "kld_uninformative"],
            rows,
        )?;
    }
    out.csv("metrics.csv", &["experiment", "model", "time", "mse", "re"], metrics)?;

    let seeds = Seeds::new(cfg.seed);
    let mut manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        scenario: cfg.scenario,
        mode: cfg.mode,
        stages: cfg.stages,
        master_seed: cfg.seed,
        seeds: Stream::ALL
            .iter()
            .map(|&s| SeedEntry {
                stream: s,
                root: seeds.root(s),
            })
            .collect(),
        config_sha256: config_hash(cfg),
        final_map: result.records.last().map(|r| r.map),
        final_estimate: result.records.last().map(|r| r.estimate),
        final_params: result.final_params(),
        files: Vec::new(),
    };
    manifest.files = std::mem::take(&mut out.files);
    let text = serde_json::to_string_pretty(&manifest)?;
    let path = dir.join("manifest.json");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Row-major `nx × ny` values as a heatmap, one pixel block per node,
/// `y` upward, scaled to the value range.
#[cfg(feature = "png")]
fn heatmap_png(values: &[f64], nx: usize, ny: usize) -> Result<Vec<u8>> {
    const SCALE: usize = 6;
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img = image::RgbImage::new((nx * SCALE) as u32, (ny * SCALE) as u32);
    for (k, &m) in values.iter().enumerate() {
        let (ix, iy) = (k % nx, k / nx);
        let v = ((m - lo) / span).clamp(0.0, 1.0);
        let px = image::Rgb([
            (255.0 * v.sqrt()) as u8,
            (255.0 * v * v) as u8,
            (255.0 * (1.0 - v) * 0.5) as u8,
        ]);
        for dy in 0..SCALE {
            for dx in 0..SCALE {
                let y = (ny - 1 - iy) * SCALE + dy;
                img.put_pixel((ix * SCALE + dx) as u32, y as u32, px);
            }
        }
    }
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::InvalidArgument(format!("png encoding: {e}")))?;
    Ok(bytes)
}

#[cfg(feature = "png")]
fn field_pngs(out: &mut Out, prefix: &str, fields: &WindowFields) -> Result<()> {
    let side = (fields.coords.len() as f64).sqrt().round() as usize;
    if side * side != fields.coords.len() {
        return Ok(());
    }
    for (name, col) in &fields.columns {
        let png = heatmap_png(col, side, side)?;
        out.put(&format!("{prefix}_{name}.png"), &png)?;
    }
    Ok(())
}

//! One-axis parameter sweeps. Each value of the chosen axis gets a full
//! pipeline run in its own cell directory; the sweep directory collects a
//! CSV table and an SVG chart of attack success and caption quality.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::{parse_location, parse_mask, parse_optimizer, RunConfig};
use super::pipeline::{run_attack, stage_err};
use super::run::{create_prefixed_dir, runs_home};
use super::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Rate,
    TriggerSize,
    Linf,
    Location,
    Shape,
    Optimizer,
}

pub fn parse_axis(s: &str) -> Result<SweepAxis, CliError> {
    match s {
        "rate" => Ok(SweepAxis::Rate),
        "trigger-size" => Ok(SweepAxis::TriggerSize),
        "linf" => Ok(SweepAxis::Linf),
        "location" => Ok(SweepAxis::Location),
        "shape" => Ok(SweepAxis::Shape),
        "optimizer" => Ok(SweepAxis::Optimizer),
        _ => Err(CliError::Usage(format!(
            "unknown sweep axis {s:?}; expected rate, trigger-size, linf, location, shape, or optimizer"
        ))),
    }
}

/// Applies one axis value to a copy of the base config.
pub fn apply_axis(cfg: &mut RunConfig, axis: SweepAxis, value: &str) -> Result<(), CliError> {
    let bad = |msg: String| CliError::Usage(msg);
    match axis {
        SweepAxis::Rate => {
            cfg.poison.rate =
                value.parse().map_err(|_| bad(format!("rate {value:?} is not a number")))?;
        }
        SweepAxis::TriggerSize => {
            let (h, w) = match value.split_once('x') {
                Some((h, w)) => (h, w),
                None => (value, value),
            };
            cfg.trigger.height =
                h.parse().map_err(|_| bad(format!("trigger size {value:?} is not HxW")))?;
            cfg.trigger.width =
                w.parse().map_err(|_| bad(format!("trigger size {value:?} is not HxW")))?;
        }
        SweepAxis::Linf => {
            let linf: f64 =
                value.parse().map_err(|_| bad(format!("linf {value:?} is not a number")))?;
            cfg.trigger.linf_bound = linf;
            // Step size tracks the budget at the protocol ratio.
            cfg.trigger.eta = linf / 10.0;
        }
        SweepAxis::Location => cfg.trigger.location = parse_location(value)?,
        SweepAxis::Shape => cfg.trigger.mask = parse_mask(value)?,
        SweepAxis::Optimizer => cfg.trigger.optimizer = parse_optimizer(value)?,
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub value: String,
    pub ok: bool,
    pub fooling: f64,
    pub asr: f64,
    pub bleu4: f64,
    pub clean_bleu4: f64,
    pub max_auroc: f64,
}

fn cell_dir_name(idx: usize, value: &str) -> String {
    let slug: String = value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect();
    format!("cell-{idx}-{slug}")
}

pub fn write_sweep_csv(axis: &str, cells: &[SweepCell], path: &Path) -> Result<(), CliError> {
    let mut out = String::from("axis,value,status,fooling,asr,bleu4,clean_bleu4,max_auroc\n");
    for cell in cells {
        if cell.ok {
            writeln!(
                out,
                "{axis},{},ok,{:.6},{:.6},{:.6},{:.6},{:.6}",
                cell.value, cell.fooling, cell.asr, cell.bleu4, cell.clean_bleu4, cell.max_auroc
            )
            .expect("write to string");
        } else {
            writeln!(out, "{axis},{},failed,,,,,", cell.value).expect("write to string");
        }
    }
    fs::write(path, out).map_err(stage_err)
}

/// Attack success and caption quality across the axis, failed cells marked
/// on the x labels and left out of the curves.
pub fn render_sweep_svg(axis: &str, cells: &[SweepCell]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const M: f64 = 50.0;
    let plot_w = W - 2.0 * M;
    let plot_h = H - 2.0 * M;
    let n = cells.len().max(1);
    let x_at = |i: usize| {
        if n == 1 {
            M + plot_w / 2.0
        } else {
            M + plot_w * i as f64 / (n - 1) as f64
        }
    };
    let y_at = |v: f64| M + plot_h * (1.0 - v.clamp(0.0, 1.0));

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"monospace\" font-size=\"11\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">sweep over {axis}</text>\n",
        W / 2.0
    );
    for frac in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let y = y_at(frac);
        let _ = write!(
            svg,
            "<line x1=\"{M}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#dddddd\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{frac:.2}</text>\n",
            W - M,
            M - 6.0,
            y + 4.0
        );
    }
    for (series, color) in [("asr", "#c04848"), ("bleu4", "#4878a8")] {
        let mut points = String::new();
        for (i, cell) in cells.iter().enumerate() {
            if !cell.ok {
                continue;
            }
            let v = if series == "asr" { cell.asr } else { cell.bleu4 };
            let _ = write!(points, "{:.1},{:.1} ", x_at(i), y_at(v));
            let _ = write!(
                svg,
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>\n",
                x_at(i),
                y_at(v)
            );
        }
        if !points.trim().is_empty() {
            let _ = write!(
                svg,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
                points.trim()
            );
        }
    }
    for (i, cell) in cells.iter().enumerate() {
        let label =
            if cell.ok { cell.value.clone() } else { format!("{} (failed)", cell.value) };
        let fill = if cell.ok { "#333333" } else { "#c04848" };
        let _ = write!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" fill=\"{fill}\">{label}</text>\n",
            x_at(i),
            H - M + 18.0
        );
    }
    let _ = write!(
        svg,
        "<rect x=\"{M}\" y=\"{M}\" width=\"{plot_w}\" height=\"{plot_h}\" fill=\"none\" \
         stroke=\"#333333\"/>\n\
         <circle cx=\"{}\" cy=\"14\" r=\"4\" fill=\"#c04848\"/>\
         <text x=\"{}\" y=\"18\">asr</text>\n\
         <circle cx=\"{}\" cy=\"14\" r=\"4\" fill=\"#4878a8\"/>\
         <text x=\"{}\" y=\"18\">bleu4</text>\n</svg>\n",
        W - 150.0,
        W - 142.0,
        W - 100.0,
        W - 92.0
    );
    svg
}

/// Runs the pipeline once per value, keeps going past failed cells, and
/// writes sweep.csv plus sweep.svg into the sweep directory.
pub fn run_sweep(
    base: &RunConfig,
    axis_name: &str,
    values: &[String],
    out: Option<&Path>,
) -> Result<(PathBuf, Vec<SweepCell>), CliError> {
    let axis = parse_axis(axis_name)?;
    if values.is_empty() {
        return Err(CliError::Usage("sweep needs at least one value".into()));
    }
    let sweep_dir = match out {
        Some(p) => {
            fs::create_dir_all(p).map_err(stage_err)?;
            p.to_path_buf()
        }
        None => create_prefixed_dir(&runs_home(), "sweep", &base.hash())?,
    };

    let mut cells = Vec::with_capacity(values.len());
    for (idx, value) in values.iter().enumerate() {
        let mut cfg = base.clone();
        let cell = match apply_axis(&mut cfg, axis, value)
            .and_then(|()| run_attack(&cfg, Some(&sweep_dir.join(cell_dir_name(idx, value)))))
        {
            Ok(outcome) => SweepCell {
                value: value.clone(),
                ok: true,
                fooling: outcome.fooling.rate(),
                asr: outcome.backdoored.asr,
                bleu4: outcome.backdoored.bleu4,
                clean_bleu4: outcome.clean.bleu4,
                max_auroc: outcome.defense.max_auroc,
            },
            Err(e) => {
                eprintln!("[sweep] {axis_name}={value} failed: {e}");
                SweepCell {
                    value: value.clone(),
                    ok: false,
                    fooling: f64::NAN,
                    asr: f64::NAN,
                    bleu4: f64::NAN,
                    clean_bleu4: f64::NAN,
                    max_auroc: f64::NAN,
                }
            }
        };
        cells.push(cell);
    }

    write_sweep_csv(axis_name, &cells, &sweep_dir.join("sweep.csv"))?;
    fs::write(sweep_dir.join("sweep.svg"), render_sweep_svg(axis_name, &cells))
        .map_err(stage_err)?;
    Ok((sweep_dir, cells))
}

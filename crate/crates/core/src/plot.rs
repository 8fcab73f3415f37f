//! Figure emission: accuracy curves with seed-spread bands and an average
//! accuracy bar chart, rendered as standalone SVG files.
//!
//! The renderer is deterministic: identical inputs produce identical bytes.

use std::path::Path;

use crate::artifacts::{load_run_metrics, run_label, SeedMetrics};
use crate::error::{Error, Result};

/// One method/ablation group: all seeds of one run directory.
#[derive(Debug, Clone)]
pub struct RunGroup {
    pub label: String,
    pub tasks: usize,
    /// Per seed, the stage accuracies A_t.
    pub per_seed_stage: Vec<Vec<f64>>,
    /// Per seed, the overall average accuracy.
    pub per_seed_average: Vec<f64>,
}

impl RunGroup {
    pub fn mean_stage(&self) -> Vec<f64> {
        let seeds = self.per_seed_stage.len() as f64;
        (0..self.tasks)
            .map(|t| self.per_seed_stage.iter().map(|s| s[t]).sum::<f64>() / seeds)
            .collect()
    }

    pub fn stage_band(&self) -> (Vec<f64>, Vec<f64>) {
        let lo = (0..self.tasks)
            .map(|t| {
                self.per_seed_stage
                    .iter()
                    .map(|s| s[t])
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let hi = (0..self.tasks)
            .map(|t| {
                self.per_seed_stage
                    .iter()
                    .map(|s| s[t])
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        (lo, hi)
    }

    pub fn mean_average(&self) -> f64 {
        self.per_seed_average.iter().sum::<f64>() / self.per_seed_average.len() as f64
    }
}

/// Load one run directory as a plot group.
pub fn load_run_group(dir: &Path) -> Result<RunGroup> {
    let (manifest, metrics) = load_run_metrics(dir)?;
    if metrics.is_empty() {
        return Err(Error::Plot(format!("{} holds no seed metrics", dir.display())));
    }
    let tasks = metrics[0].per_stage.len();
    group_from_metrics(run_label(&manifest.config), tasks, &metrics)
}

pub(crate) fn group_from_metrics(
    label: String,
    tasks: usize,
    metrics: &[SeedMetrics],
) -> Result<RunGroup> {
    let mut group = RunGroup {
        label,
        tasks,
        per_seed_stage: Vec::new(),
        per_seed_average: Vec::new(),
    };
    for m in metrics {
        if m.per_stage.len() != tasks {
            return Err(Error::Plot(format!(
                "seed {} has {} stages, expected {tasks}",
                m.seed,
                m.per_stage.len()
            )));
        }
        group.per_seed_stage.push(m.per_stage.clone());
        group.per_seed_average.push(m.average);
    }
    Ok(group)
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 58.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 48.0;

fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn x(&self, t: f64) -> f64 {
        MARGIN_L + (WIDTH - MARGIN_L - MARGIN_R) * (t - self.x0) / (self.x1 - self.x0)
    }

    fn y(&self, v: f64) -> f64 {
        let span = (self.y1 - self.y0).max(1e-9);
        HEIGHT - MARGIN_B - (HEIGHT - MARGIN_T - MARGIN_B) * (v - self.y0) / span
    }
}

fn svg_header(title: &str) -> String {
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<text x=\"{tx}\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n"
        ),
        w = WIDTH,
        h = HEIGHT,
        tx = WIDTH / 2.0,
        title = title,
    )
}

fn axes(svg: &mut String, frame: &Frame, x_label: &str, y_label: &str, x_ticks: &[f64]) {
    svg.push_str(&format!(
        "<line x1=\"{l}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n<line x1=\"{l}\" y1=\"{t}\" x2=\"{l}\" y2=\"{b}\" stroke=\"black\"/>\n",
        l = MARGIN_L,
        r = WIDTH - MARGIN_R,
        t = MARGIN_T,
        b = HEIGHT - MARGIN_B,
    ));
    for tick in x_ticks {
        let x = frame.x(*tick);
        svg.push_str(&format!(
            "<line x1=\"{x}\" y1=\"{b}\" x2=\"{x}\" y2=\"{b2}\" stroke=\"black\"/>\n<text x=\"{x}\" y=\"{ty}\" text-anchor=\"middle\">{v}</text>\n",
            b = HEIGHT - MARGIN_B,
            b2 = HEIGHT - MARGIN_B + 5.0,
            ty = HEIGHT - MARGIN_B + 19.0,
            v = *tick as usize,
        ));
    }
    let y_span = frame.y1 - frame.y0;
    for i in 0..=5 {
        let v = frame.y0 + y_span * i as f64 / 5.0;
        let y = frame.y(v);
        svg.push_str(&format!(
            "<line x1=\"{x1}\" y1=\"{y}\" x2=\"{l}\" y2=\"{y}\" stroke=\"black\"/>\n<text x=\"{tx}\" y=\"{ty}\" text-anchor=\"end\">{v}</text>\n",
            x1 = MARGIN_L - 5.0,
            l = MARGIN_L,
            tx = MARGIN_L - 8.0,
            ty = y + 4.0,
            v = fmt(v),
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{x}\" y=\"{y}\" text-anchor=\"middle\">{x_label}</text>\n",
        x = (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        y = HEIGHT - 10.0,
    ));
    svg.push_str(&format!(
        "<text x=\"14\" y=\"{y}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {y})\">{y_label}</text>\n",
        y = (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
    ));
}

fn legend(svg: &mut String, labels: &[&str]) {
    for (i, label) in labels.iter().enumerate() {
        let y = MARGIN_T + 8.0 + 16.0 * i as f64;
        let color = PALETTE[i % PALETTE.len()];
        svg.push_str(&format!(
            "<rect x=\"{x}\" y=\"{ry}\" width=\"12\" height=\"6\" fill=\"{color}\"/>\n<text x=\"{tx}\" y=\"{ty}\">{label}</text>\n",
            x = WIDTH - MARGIN_R - 170.0,
            ry = y - 5.0,
            tx = WIDTH - MARGIN_R - 152.0,
            ty = y + 1.0,
        ));
    }
}

/// Stage-accuracy curves (mean over seeds, min-max band) for every group.
/// Returns the plotted mean curves keyed by label, for cross-checks.
pub fn plot_accuracy_curves(groups: &[RunGroup], path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    if groups.is_empty() {
        return Err(Error::Plot("no runs to plot".into()));
    }
    let tasks = groups[0].tasks;
    if groups.iter().any(|g| g.tasks != tasks) {
        return Err(Error::Plot("runs disagree on the number of tasks".into()));
    }
    let frame = Frame {
        x0: 1.0,
        x1: tasks.max(2) as f64,
        y0: 0.0,
        y1: 1.0,
    };
    let mut svg = svg_header("Stage accuracy by task");
    let x_ticks: Vec<f64> = (1..=tasks).map(|t| t as f64).collect();
    axes(&mut svg, &frame, "task stage", "stage accuracy", &x_ticks);

    let mut series = Vec::new();
    for (i, group) in groups.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mean = group.mean_stage();
        let (lo, hi) = group.stage_band();
        if group.per_seed_stage.len() > 1 {
            let mut band = String::from("<path d=\"");
            for (t, v) in hi.iter().enumerate() {
                let cmd = if t == 0 { 'M' } else { 'L' };
                band.push_str(&format!("{cmd}{:.2},{:.2} ", frame.x((t + 1) as f64), frame.y(*v)));
            }
            for (t, v) in lo.iter().enumerate().rev() {
                band.push_str(&format!("L{:.2},{:.2} ", frame.x((t + 1) as f64), frame.y(*v)));
            }
            band.push_str(&format!("Z\" fill=\"{color}\" opacity=\"0.15\"/>\n"));
            svg.push_str(&band);
        }
        let mut line = String::from("<polyline fill=\"none\" stroke-width=\"2\" points=\"");
        for (t, v) in mean.iter().enumerate() {
            line.push_str(&format!("{:.2},{:.2} ", frame.x((t + 1) as f64), frame.y(*v)));
        }
        line.push_str(&format!("\" stroke=\"{color}\"/>\n"));
        svg.push_str(&line);
        series.push((group.label.clone(), mean));
    }
    let labels: Vec<&str> = groups.iter().map(|g| g.label.as_str()).collect();
    legend(&mut svg, &labels);
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(series)
}

/// Bar chart of mean average accuracy per group, with per-seed dots.
pub fn plot_average_bars(groups: &[RunGroup], path: &Path) -> Result<Vec<(String, f64)>> {
    if groups.is_empty() {
        return Err(Error::Plot("no runs to plot".into()));
    }
    let frame = Frame {
        x0: 0.0,
        x1: groups.len() as f64,
        y0: 0.0,
        y1: 1.0,
    };
    let mut svg = svg_header("Average accuracy");
    axes(&mut svg, &frame, "", "average accuracy", &[]);
    let mut bars = Vec::new();
    let slot = (WIDTH - MARGIN_L - MARGIN_R) / groups.len() as f64;
    for (i, group) in groups.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mean = group.mean_average();
        let x = MARGIN_L + slot * (i as f64 + 0.25);
        let w = slot * 0.5;
        let y = frame.y(mean);
        svg.push_str(&format!(
            "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{w:.2}\" height=\"{h:.2}\" fill=\"{color}\" opacity=\"0.8\"/>\n",
            h = HEIGHT - MARGIN_B - y,
        ));
        for avg in &group.per_seed_average {
            svg.push_str(&format!(
                "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"2.5\" fill=\"black\"/>\n",
                cx = x + w / 2.0,
                cy = frame.y(*avg),
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{tx:.2}\" y=\"{ty}\" text-anchor=\"middle\">{label}</text>\n",
            tx = x + w / 2.0,
            ty = HEIGHT - MARGIN_B + 19.0,
            label = group.label,
        ));
        bars.push((group.label.clone(), mean));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(bars)
}

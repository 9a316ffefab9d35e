use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use layerstat::detector::{ScoredSample, Task};
use layerstat::metrics::{pauc_name, write_sweep_csv, SweepPoint};
use plotters::prelude::*;
use serde::Serialize;

use crate::config::{Failure, RunConfig};

/// Files written under the output directory, in creation order.
pub struct Outputs {
    root: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    pub fn create(root: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(root).map_err(|e| Failure::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Path for `name`, recorded in the manifest.
    pub fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.root.join(name)
    }

    pub fn writer(&mut self, name: &str) -> Result<BufWriter<File>, Failure> {
        let path = self.path(name);
        File::create(&path)
            .map(BufWriter::new)
            .map_err(|e| Failure::io(path, e))
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), Failure> {
        let mut w = self.writer(name)?;
        let path = self.root.join(name);
        serde_json::to_writer_pretty(&mut w, value).map_err(|e| Failure::io(&path, e.into()))?;
        writeln!(w).and_then(|_| w.flush()).map_err(|e| Failure::io(path, e))
    }

    /// Writes `run.json` listing the resolved config and every output.
    pub fn finish(mut self, command: &str, config: &RunConfig) -> Result<(), Failure> {
        #[derive(Serialize)]
        struct Manifest<'a> {
            tool: &'static str,
            version: &'static str,
            command: &'a str,
            config: &'a RunConfig,
            outputs: &'a [String],
        }
        let files = std::mem::take(&mut self.files);
        self.json(
            "run.json",
            &Manifest {
                tool: "layerstat",
                version: env!("CARGO_PKG_VERSION"),
                command,
                config,
                outputs: &files,
            },
        )
    }
}

fn csv_failure(path: &Path, e: csv::Error) -> Failure {
    Failure::io(path, std::io::Error::other(e))
}

/// Writes one row per scored sample. Out-of-distribution scores carry no
/// corrected class.
pub fn write_scores(
    out: &mut Outputs,
    name: &str,
    scores: &[ScoredSample],
    true_labels: &[usize],
    task: Task,
) -> Result<(), Failure> {
    let path = out.root().join(name);
    let mut w = csv::Writer::from_writer(out.writer(name)?);
    let mut header = vec!["sample_id", "true_class", "pred_class", "score", "detected"];
    if task == Task::Adversarial {
        header.push("corrected_class");
    }
    w.write_record(&header).map_err(|e| csv_failure(&path, e))?;
    for (s, &y) in scores.iter().zip(true_labels) {
        let score = match task {
            Task::Adversarial => s.adv_score,
            Task::Ood => s.ood_score,
        };
        let mut row = vec![
            s.sample_id.to_string(),
            y.to_string(),
            s.pred_class.to_string(),
            score.to_string(),
            s.detected.to_string(),
        ];
        if task == Task::Adversarial {
            row.push(s.corrected_class.to_string());
        }
        w.write_record(&row).map_err(|e| csv_failure(&path, e))?;
    }
    w.flush().map_err(|e| Failure::io(path, e))
}

/// `score` and, when present, `norm` columns of a score file.
pub fn read_scores(path: &Path) -> Result<(Vec<f64>, Option<Vec<f64>>), Failure> {
    let data_err = |msg: String| Failure::Core(layerstat::Error::Manifest {
        path: path.to_path_buf(),
        message: msg,
    });
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_failure(path, e))?;
    let headers = r.headers().map_err(|e| csv_failure(path, e))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let score_col = col("score").ok_or_else(|| data_err("no 'score' column".into()))?;
    let norm_col = col("norm");
    let mut scores = Vec::new();
    let mut norms = norm_col.map(|_| Vec::new());
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_failure(path, e))?;
        let parse = |c: usize| -> Result<f64, Failure> {
            let field = rec.get(c).unwrap_or("");
            field
                .parse::<f64>()
                .map_err(|_| data_err(format!("row {}: '{field}' is not a number", i + 1)))
        };
        scores.push(parse(score_col)?);
        if let (Some(c), Some(n)) = (norm_col, norms.as_mut()) {
            n.push(parse(c)?);
        }
    }
    Ok((scores, norms))
}

pub fn write_sweep(out: &mut Outputs, name: &str, points: &[SweepPoint]) -> Result<(), Failure> {
    let path = out.root().join(name);
    let mut w = out.writer(name)?;
    write_sweep_csv(&mut w, points)
        .and_then(|_| w.flush())
        .map_err(|e| Failure::io(path, e))
}

/// SVG line chart of every sweep metric against `x_label`.
pub fn plot_sweep(out: &mut Outputs, name: &str, title: &str, x_label: &str, points: &[SweepPoint]) -> Result<(), Failure> {
    let path = out.path(name);
    let mut series: Vec<(String, Vec<(f64, f64)>)> =
        vec![("average_precision".into(), points.iter().map(|p| (p.x_value, p.average_precision)).collect())];
    if let Some(first) = points.first() {
        for (j, &(alpha, _)) in first.pauc.iter().enumerate() {
            series.push((pauc_name(alpha), points.iter().map(|p| (p.x_value, p.pauc[j].1)).collect()));
        }
    }
    let xs = points.iter().map(|p| p.x_value);
    let (lo, hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let (lo, hi) = if lo < hi { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let draw = || -> Result<(), Box<dyn std::error::Error>> {
        let root = SVGBackend::new(&path, (720, 480)).into_drawing_area();
        root.fill(&WHITE)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(50)
            .build_cartesian_2d(lo..hi, 0.0..1.0)?;
        chart.configure_mesh().x_desc(x_label).y_desc("metric").draw()?;
        for (i, (label, pts)) in series.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))?
                .label(label.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()?;
        root.present()?;
        Ok(())
    };
    draw().map_err(|e| Failure::io(&path, std::io::Error::other(e.to_string())))
}

//! Accuracy metrics, analytic cost counting, latency benchmarking and reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{BnMode, CostTally, Tape};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::labels::{IdGrid, LabelMap};
use crate::model::{argmax_labels, CbsOutputSize, KernelMode, Model, ModelConfig};
use crate::tensor::{ConvSpec, Real, Tensor};
use crate::train::{normalize_image, stack_images};

/// K×K counts, rows = ground truth, columns = prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    /// Row-major K×K counts.
    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != k * k {
            return Err(Error::Shape(format!("{} counts for a {k}x{k} matrix", counts.len())));
        }
        Ok(Self { k, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds the pixels of one prediction/ground-truth pair.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap, ignore_index: u8) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(Error::Shape(format!(
                "prediction is {}x{} but ground truth is {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        for (&p, &g) in pred.ids().iter().zip(gt.ids()) {
            if g == ignore_index {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if g >= self.k || p >= self.k {
                return Err(Error::LabelOutOfRange {
                    id: g.max(p) as u32,
                    classes: self.k,
                });
            }
            self.counts[g * self.k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::Shape(format!(
                "merging {}-class into {}-class matrix",
                other.k, self.k
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

pub fn confusion(pred: &LabelMap, gt: &LabelMap, k: usize, ignore_index: u8) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(k);
    cm.accumulate(pred, gt, ignore_index)?;
    Ok(cm)
}

/// Per-class IoU (None when TP+FP+FN = 0) and their mean over defined classes.
pub fn miou(cm: &ConfusionMatrix) -> Result<(Vec<Option<f64>>, f64)> {
    let k = cm.k;
    let per_class: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let tp = cm.get(c, c);
            let fn_: u64 = (0..k).map(|p| cm.get(c, p)).sum::<u64>() - tp;
            let fp: u64 = (0..k).map(|g| cm.get(g, c)).sum::<u64>() - tp;
            let denom = tp + fp + fn_;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::NoScoredClasses);
    }
    let mean = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok((per_class, mean))
}

/// Eval-mode argmax predictions, `batch` images per forward.
pub fn predict_labels<T: Real>(
    model: &Model<T>,
    samples: &[Sample],
    channel_means: &[f32],
    batch: usize,
) -> Result<Vec<LabelMap>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let images = chunk
            .iter()
            .map(|s| normalize_image(&s.image, channel_means))
            .collect::<Result<Vec<_>>>()?;
        let x = stack_images(&images)?.cast::<T>();
        let pred = model.predict(&x)?;
        out.extend(argmax_labels(&pred.seg_logits)?);
    }
    Ok(out)
}

/// Confusion matrix of a model over samples.
pub fn evaluate_model<T: Real>(
    model: &Model<T>,
    samples: &[Sample],
    channel_means: &[f32],
    ignore_index: u8,
) -> Result<ConfusionMatrix> {
    let k = model.config().num_classes;
    let preds = predict_labels(model, samples, channel_means, 4)?;
    let mut cm = ConfusionMatrix::new(k);
    for (p, s) in preds.iter().zip(samples) {
        cm.accumulate(p, &s.labels, ignore_index)?;
    }
    Ok(cm)
}

/// Cost of one layer of the BN-folded network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub macs: u64,
    /// Pooling and elementwise ops, one per output element.
    pub other_ops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub macs: u64,
    /// 2 × macs.
    pub flops: u64,
    pub other_ops: u64,
}

/// N·C_out·H'·W'·(C_in/groups)·k_h·k_w for an N×C_in×h×w input.
pub fn conv_macs(spec: &ConvSpec, n: usize, h: usize, w: usize) -> Result<u64> {
    let (oh, ow) = spec.output_hw(h, w)?;
    Ok((n * spec.out_channels * oh * ow * (spec.in_channels / spec.groups) * spec.kernel_h * spec.kernel_w) as u64)
}

struct Counter {
    n: usize,
    layers: Vec<LayerCost>,
}

impl Counter {
    fn push(&mut self, name: String, macs: usize, other_ops: usize) {
        self.layers.push(LayerCost {
            name,
            macs: macs as u64,
            other_ops: other_ops as u64,
        });
    }

    /// Conv on an h×w map; returns the output extent.
    fn conv(&mut self, name: String, spec: &ConvSpec, h: usize, w: usize) -> Result<(usize, usize)> {
        let macs = conv_macs(spec, self.n, h, w)?;
        self.push(name, macs as usize, 0);
        spec.output_hw(h, w)
    }

    fn relu(&mut self, name: String, c: usize, h: usize, w: usize) {
        self.push(name, 0, self.n * c * h * w);
    }

    /// `window` is (kernel, stride, padding).
    fn pool(
        &mut self,
        name: String,
        c: usize,
        window: (usize, usize, usize),
        h: usize,
        w: usize,
    ) -> Result<(usize, usize)> {
        let (k, s, p) = window;
        let spec = ConvSpec::new(c, c, k, s, p);
        let (oh, ow) = spec.output_hw(h, w)?;
        self.push(name, 0, self.n * c * oh * ow);
        Ok((oh, ow))
    }

    fn bilinear(&mut self, name: String, c: usize, h: usize, w: usize) {
        self.push(name, 4 * self.n * c * h * w, 0);
    }

    /// Separable k=3 conv + ReLU at stride 1.
    fn separable(&mut self, name: &str, cin: usize, cout: usize, h: usize, w: usize) -> Result<()> {
        self.conv(
            format!("{name}.dw"),
            &ConvSpec::new(cin, cin, 3, 1, 1).with_groups(cin),
            h,
            w,
        )?;
        self.conv(format!("{name}.pw"), &ConvSpec::new(cin, cout, 1, 1, 0), h, w)?;
        self.relu(format!("{name}.relu"), cout, h, w);
        Ok(())
    }
}

/// Analytic per-layer MACs of the BN-folded network for an N×C×H×W input.
pub fn count_flops(config: &ModelConfig, n: usize, height: usize, width: usize) -> Result<CostReport> {
    config.validate()?;
    config.check_input(height, width)?;
    let enc = &config.encoder;
    let ch = &enc.stage_channels;
    let mut c = Counter { n, layers: Vec::new() };

    let m1 = enc.stage_strides[0];
    let stem = ConvSpec::new(enc.input_channels, ch[0], 7, if m1 == 1 { 1 } else { 2 }, 3);
    let (mut h, mut w) = c.conv("stem.conv".into(), &stem, height, width)?;
    c.relu("stem.relu".into(), ch[0], h, w);
    if m1 == 4 {
        (h, w) = c.pool("stem.pool".into(), ch[0], (3, 2, 1), h, w)?;
    }
    let mut cin = ch[0];
    let mut stage_hw = Vec::new();
    for (i, (&cout, &blocks)) in ch.iter().zip(&enc.blocks_per_stage).enumerate() {
        let stride = if i == 0 {
            1
        } else {
            enc.stage_strides[i] / enc.stage_strides[i - 1]
        };
        for k in 0..blocks {
            let name = format!("stage{}.block{k}", i + 1);
            let (s, ci) = if k == 0 { (stride, cin) } else { (1, cout) };
            let (oh, ow) = c.conv(format!("{name}.conv1"), &ConvSpec::new(ci, cout, 3, s, 1), h, w)?;
            c.relu(format!("{name}.relu1"), cout, oh, ow);
            c.conv(format!("{name}.conv2"), &ConvSpec::new(cout, cout, 3, 1, 1), oh, ow)?;
            if s != 1 || ci != cout {
                c.conv(format!("{name}.down"), &ConvSpec::new(ci, cout, 1, s, 0), h, w)?;
            }
            c.push(format!("{name}.add"), 0, n * cout * oh * ow);
            c.relu(format!("{name}.relu2"), cout, oh, ow);
            (h, w) = (oh, ow);
        }
        stage_hw.push((h, w));
        cin = cout;
    }

    for slot in config.sap_slots().into_iter().filter(|s| s.j > 0) {
        let (ci, s) = (ch[slot.stage], 1usize << slot.j);
        let (bh, bw) = stage_hw[slot.stage];
        let name = format!("sap.stage{}.j{}", slot.stage + 1, slot.j);
        match config.sap.kernel_mode {
            KernelMode::KernelTwoSPlusOne => {
                c.pool(name, ci, (2 * s + 1, s, s), bh, bw)?;
            }
            KernelMode::KernelEqualsStride => {
                c.pool(name, ci, (s, s, 0), bh, bw)?;
            }
            KernelMode::DilatedConv3x3 => {
                let spec = ConvSpec::new(ci, ci, 3, s, s).with_groups(ci).with_dilation(s);
                c.conv(name, &spec, bh, bw)?;
            }
        }
    }

    let fw = config.fusion_width;
    let extent = |r: usize| (height / r, width / r);
    for (r, members) in config.pyramid_groups() {
        let ci = members.iter().map(|s| ch[s.stage]).sum();
        let (rh, rw) = extent(r);
        c.separable(&format!("mfm.r{r}"), ci, fw, rh, rw)?;
    }
    for k in 0..config.branch_count {
        for r in config.decoder_ladder() {
            let (rh, rw) = extent(r);
            c.bilinear(format!("branch{k}.r{r}.up"), fw, rh, rw);
            c.separable(&format!("branch{k}.r{r}"), 2 * fw, fw, rh, rw)?;
        }
    }
    let (oh, ow) = extent(config.output_stride());
    if config.branch_fusion == crate::model::BranchFusion::Concat {
        c.separable("merge", config.branch_count * fw, fw, oh, ow)?;
    }
    let k = config.num_classes;
    c.conv("seg_head".into(), &ConvSpec::new(fw, k, 1, 1, 0), oh, ow)?;
    c.bilinear("seg_head.up".into(), k, height, width);
    if let Some(bk) = config.boundary_classes() {
        c.conv("boundary_head".into(), &ConvSpec::new(fw, bk, 1, 1, 0), oh, ow)?;
        if config.cbs_output_size == CbsOutputSize::FullScale {
            c.bilinear("boundary_head.up".into(), bk, height, width);
        }
    }

    let macs = c.layers.iter().map(|l| l.macs).sum();
    let other_ops = c.layers.iter().map(|l| l.other_ops).sum();
    Ok(CostReport {
        layers: c.layers,
        macs,
        flops: 2 * macs,
        other_ops,
    })
}

/// Cost tally of one eval-mode forward, measured by the tape.
pub fn measure_costs<T: Real>(model: &Model<T>, n: usize, height: usize, width: usize) -> Result<CostTally> {
    let c = model.config().encoder.input_channels;
    let mut tape = Tape::inference();
    let mut bound = model.bind(&mut tape, BnMode::Eval);
    let x = bound.tape().leaf(Tensor::zeros(&[n, c, height, width]));
    bound.forward(x)?;
    drop(bound);
    Ok(tape.tally())
}

/// Raw per-run latencies and their summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub runs: usize,
    pub warmup: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    /// 1000 / mean_ms.
    pub fps: f64,
    pub samples_ms: Vec<f64>,
}

impl LatencyStats {
    pub fn from_samples(samples_ms: Vec<f64>, warmup: usize) -> Result<Self> {
        if samples_ms.is_empty() {
            return Err(Error::Config("latency needs at least one run".into()));
        }
        let n = samples_ms.len();
        let mean_ms = samples_ms.iter().sum::<f64>() / n as f64;
        let mut sorted = samples_ms.clone();
        sorted.sort_by(f64::total_cmp);
        let median_ms = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        // Nearest rank.
        let p95_ms = sorted[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1];
        Ok(Self {
            runs: n,
            warmup,
            mean_ms,
            median_ms,
            p95_ms,
            fps: 1000.0 / mean_ms,
            samples_ms,
        })
    }
}

pub const DEFAULT_BENCH_RUNS: usize = 500;

/// Times `runs` eval-mode forwards on a fixed random input after `warmup`
/// untimed ones. Fold batch norms beforehand to time the deployed network.
pub fn bench_latency<T: Real>(model: &Model<T>, dims: [usize; 4], runs: usize, warmup: usize) -> Result<LatencyStats> {
    if runs == 0 {
        return Err(Error::Config("bench needs at least one run".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::<T>::rand_uniform(&dims, -1.0, 1.0, &mut rng);
    let check = |out: &Tensor<T>| -> Result<()> { out.ensure_finite("bench output") };
    for _ in 0..warmup {
        check(&model.predict(&x)?.seg_logits)?;
    }
    let mut samples = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        let pred = model.predict(&x)?;
        samples.push(start.elapsed().as_secs_f64() * 1e3);
        check(&pred.seg_logits)?;
    }
    LatencyStats::from_samples(samples, warmup)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Absent for classes never seen in ground truth or prediction.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub macs: u64,
    pub flops: u64,
    pub latency: Option<LatencyStats>,
    /// `key = value` pairs of the configuration that produced the report.
    pub config: Vec<(String, String)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Svg,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "svg" => Ok(Self::Svg),
            other => Err(Error::Parse(format!(
                "unknown report format `{other}` (json, csv or svg)"
            ))),
        }
    }
}

pub fn report_to_json(report: &MetricsReport) -> Result<String> {
    serde_json::to_string_pretty(report).map_err(|e| Error::Format(e.to_string()))
}

/// Header, one row per class, then a `mean` row.
pub fn report_to_csv(report: &MetricsReport) -> String {
    let mut out = String::from("class,iou\n");
    for (c, iou) in report.per_class_iou.iter().enumerate() {
        let v = iou.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{c},{v}");
    }
    let _ = writeln!(out, "mean,{}", report.miou);
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Per-class IoU bars, plus a latency histogram when latency is present.
pub fn report_to_svg(report: &MetricsReport) -> String {
    const BAR_W: f64 = 24.0;
    const CHART_H: f64 = 160.0;
    const TOP: f64 = 30.0;
    let k = report.per_class_iou.len().max(1);
    let width = (k as f64 * BAR_W + 80.0).max(360.0);
    let hist_h = if report.latency.is_some() { CHART_H + 60.0 } else { 0.0 };
    let height = TOP + CHART_H + 40.0 + hist_h;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="10" y="18">{}</text>"#,
        xml_escape(&format!("per-class IoU (mIoU {:.4})", report.miou))
    );
    for (c, iou) in report.per_class_iou.iter().enumerate() {
        let x = 40.0 + c as f64 * BAR_W;
        let v = iou.unwrap_or(0.0);
        let h = v * CHART_H;
        let _ = writeln!(
            s,
            r##"<rect x="{x}" y="{}" width="{}" height="{h}" fill="#4a7ab5"><title>class {c}: {}</title></rect>"##,
            TOP + CHART_H - h,
            BAR_W - 4.0,
            iou.map_or("undefined".to_string(), |v| v.to_string())
        );
        let _ = writeln!(s, r#"<text x="{x}" y="{}">{c}</text>"#, TOP + CHART_H + 12.0);
    }
    if let Some(lat) = &report.latency {
        let y0 = TOP + CHART_H + 40.0;
        let _ = writeln!(
            s,
            r#"<text x="10" y="{}">{}</text>"#,
            y0 + 10.0,
            xml_escape(&format!("latency over {} runs (mean {:.3} ms)", lat.runs, lat.mean_ms))
        );
        const BINS: usize = 20;
        let lo = lat.samples_ms.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = lat.samples_ms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(1e-9);
        let mut counts = [0usize; BINS];
        for &v in &lat.samples_ms {
            counts[(((v - lo) / span) * BINS as f64).min(BINS as f64 - 1.0) as usize] += 1;
        }
        let peak = *counts.iter().max().unwrap_or(&1) as f64;
        let bin_w = (width - 60.0) / BINS as f64;
        for (i, &n) in counts.iter().enumerate() {
            let h = n as f64 / peak * CHART_H;
            let _ = writeln!(
                s,
                r##"<rect x="{}" y="{}" width="{}" height="{h}" fill="#b5694a"><title>{n} runs</title></rect>"##,
                40.0 + i as f64 * bin_w,
                y0 + 20.0 + CHART_H - h,
                bin_w - 1.0
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

pub fn emit_report(report: &MetricsReport, format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = match format {
        ReportFormat::Json => report_to_json(report)?,
        ReportFormat::Csv => report_to_csv(report),
        ReportFormat::Svg => report_to_svg(report),
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

//! Inference with a frozen network: probability maps, PNG export and
//! metric reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{map_to_png, Sample};
use crate::error::{Error, Result};
use crate::loss_metrics::{ConfusionCounts, Metrics};
use crate::network::{crop, pad_to_multiple, Network};
use crate::nn::{Ctx, Grad, NetworkState};
use crate::tensor::ops::Mode;
use crate::tensor::{Tensor, Var};

pub const THRESHOLD: f64 = 0.5;

/// Probability maps for one image, cropped to its own extents.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `[1, H, W]`.
    pub out: Tensor<f32>,
    /// `m_1 … m_L` as `[1, ⌈H/2^i⌉, ⌈W/2^i⌉]`.
    pub pyramid: Vec<Tensor<f32>>,
}

/// Eval-mode forward over a batch `[N, 3, H, W]` of any extent; inputs are
/// zero-padded to the network's spatial multiple and outputs cropped back.
pub fn predict_batch(net: &Network, state: &NetworkState<f32>, images: &Tensor<f32>) -> Result<Vec<Prediction>> {
    let (n, _, h, w) = images.dims4()?;
    let multiple = net.config.spatial_multiple();
    let (padded, _) = pad_to_multiple(images, multiple)?;
    let ctx = Ctx::new(state, Mode::Eval, Grad::Off);
    let fwd = net.forward(&ctx, &Var::constant(padded))?;
    let out = crop(fwd.pyramid.out.value(), h, w)?;
    let maps = fwd
        .pyramid
        .maps
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let f = 1 << (i + 1);
            crop(m.value(), h.div_ceil(f), w.div_ceil(f))
        })
        .collect::<Result<Vec<_>>>()?;
    (0..n)
        .map(|b| {
            let single = |t: &Tensor<f32>| -> Result<Tensor<f32>> {
                let item = t.batch_item(b)?;
                let s = item.shape()[1..].to_vec();
                item.reshape(s)
            };
            Ok(Prediction {
                out: single(&out)?,
                pyramid: maps.iter().map(single).collect::<Result<_>>()?,
            })
        })
        .collect()
}

pub fn predict(net: &Network, state: &NetworkState<f32>, image: &Tensor<f32>) -> Result<Prediction> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape("predict", format!("expected [3, H, W], got {s:?}")));
    }
    let batch = image.clone().reshape(vec![1, s[0], s[1], s[2]])?;
    Ok(predict_batch(net, state, &batch)?.remove(0))
}

/// Writes `<stem>_out.png` and, with `emit_pyramid`, `<stem>_m<i>.png`.
pub fn write_prediction(pred: &Prediction, dir: &Path, stem: &str, emit_pyramid: bool) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let out = dir.join(format!("{stem}_out.png"));
    map_to_png(&pred.out)?.save(&out)?;
    written.push(out);
    if emit_pyramid {
        for (i, m) in pred.pyramid.iter().enumerate() {
            let p = dir.join(format!("{stem}_m{}.png", i + 1));
            map_to_png(m)?.save(&p)?;
            written.push(p);
        }
    }
    Ok(written)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageResult {
    pub id: String,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_image: Vec<ImageResult>,
    /// Computed from the summed confusion counts, not averaged ratios.
    pub aggregate: Metrics,
}

impl EvalReport {
    pub fn from_results(per_image: Vec<ImageResult>) -> Self {
        let counts: ConfusionCounts = per_image.iter().map(|r| r.metrics.counts).sum();
        Self {
            aggregate: counts.metrics(),
            per_image,
        }
    }

    /// `id,iou,f1,precision,recall` rows, then an `aggregate` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,iou,f1,precision,recall\n");
        let rows = self.per_image.iter().map(|r| (r.id.as_str(), &r.metrics));
        for (id, m) in rows.chain(std::iter::once(("aggregate", &self.aggregate))) {
            let _ = writeln!(out, "{id},{:.6},{:.6},{:.6},{:.6}", m.iou, m.f1, m.precision, m.recall);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let a = &self.aggregate;
        let c = a.counts;
        format!(
            "images:    {}\nIoU:       {:.4}\nF1:        {:.4}\nprecision: {:.4}\nrecall:    {:.4}\ncounts:    TP {} FP {} FN {} TN {}\n",
            self.per_image.len(),
            a.iou,
            a.f1,
            a.precision,
            a.recall,
            c.tp,
            c.fp,
            c.fn_,
            c.tn
        )
    }
}

/// Scores every sample, grouping equal-sized images into batches of at most
/// `batch`.
pub fn evaluate(net: &Network, state: &NetworkState<f32>, samples: &[Sample], batch: usize) -> Result<EvalReport> {
    let mut results = Vec::with_capacity(samples.len());
    let mut start = 0;
    while start < samples.len() {
        let size = (samples[start].height(), samples[start].width());
        let mut end = start + 1;
        while end < samples.len() && end - start < batch.max(1) && (samples[end].height(), samples[end].width()) == size {
            end += 1;
        }
        let chunk: Vec<&Sample> = samples[start..end].iter().collect();
        let (images, _) = crate::data::collate(&chunk)?;
        for (s, p) in chunk.iter().zip(predict_batch(net, state, &images)?) {
            results.push(ImageResult {
                id: s.id.clone(),
                metrics: ConfusionCounts::from_maps(&p.out, &s.mask, THRESHOLD)?.metrics(),
            });
        }
        start = end;
    }
    Ok(EvalReport::from_results(results))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ModelConfig;

    fn tiny() -> (Network, NetworkState<f32>) {
        let cfg = ModelConfig {
            base_channels: 2,
            input_size: (32, 32),
            ..ModelConfig::paper()
        };
        let net = Network::new(&cfg).unwrap();
        let state = net.init_state(0).unwrap();
        (net, state)
    }

    #[test]
    fn odd_extents_are_padded_and_cropped() {
        let (net, state) = tiny();
        let p = predict(&net, &state, &Tensor::full(vec![3, 20, 36], 0.5)).unwrap();
        assert_eq!(p.out.shape(), [1, 20, 36]);
        let sizes: Vec<_> = p.pyramid.iter().map(|m| m.shape().to_vec()).collect();
        assert_eq!(sizes, [vec![1, 10, 18], vec![1, 5, 9], vec![1, 3, 5], vec![1, 2, 3]]);
    }

    #[test]
    fn batched_equals_single() {
        let (net, state) = tiny();
        let a = Tensor::from_fn(vec![3, 32, 32], |i| (i % 13) as f32 / 13.0);
        let b = Tensor::from_fn(vec![3, 32, 32], |i| (i % 7) as f32 / 7.0);
        let batch = Tensor::stack_batch(&[a.clone().reshape(vec![1, 3, 32, 32]).unwrap(), b.reshape(vec![1, 3, 32, 32]).unwrap()]).unwrap();
        let both = predict_batch(&net, &state, &batch).unwrap();
        let single = predict(&net, &state, &a).unwrap();
        for (x, y) in both[0].out.data().iter().zip(single.out.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn csv_layout() {
        let m = ConfusionCounts { tp: 1, fp: 1, fn_: 0, tn: 2 }.metrics();
        let report = EvalReport::from_results(vec![ImageResult { id: "a".into(), metrics: m }]);
        let csv = report.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "id,iou,f1,precision,recall");
        assert_eq!(lines[1], "a,0.500000,0.666667,0.500000,1.000000");
        assert!(lines[2].starts_with("aggregate,"));
    }
}

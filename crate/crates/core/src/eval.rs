//! Decoding dense predictions into detections, COCO-convention average
//! precision, and disentanglement diagnostics.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::caption::{caption_record, BBox, TextEncoder};
use crate::data::{make_batches, write_pgm, AnnotatedImage, Dataset};
use crate::error::{Error, Result};
use crate::losses::{disentangle_loss, COSINE_EPS};
use crate::model::{DensePredData, Model};
use crate::par;
use crate::tensor::Tape;

/// One decoded detection; the category travels inside the box.
#[derive(Debug, Clone)]
pub struct Detection {
    pub image_id: usize,
    pub bbox: BBox,
    pub score: f64,
}

impl Detection {
    pub fn category_id(&self) -> usize {
        self.bbox.category_id
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let x0 = a.x.max(b.x);
    let y0 = a.y.max(b.y);
    let x1 = (a.x + a.w).min(b.x + b.w);
    let y1 = (a.y + a.h).min(b.y + b.h);
    let iw = (x1 - x0).max(0.0);
    let ih = (y1 - y0).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    pub batch_size: usize,
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub retrieval_batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { batch_size: 16, score_thresh: 0.05, nms_iou: 0.5, retrieval_batch: 16 }
    }
}

const MAX_DETECTIONS_PER_IMAGE: usize = 100;

/// Decode one batch's dense outputs into per-image detections: sigmoid
/// objectness times the best class probability, thresholded, then greedy
/// class-wise NMS, at most 100 score-sorted detections per image.
pub fn decode(
    pred: &DensePredData,
    image_ids: &[usize],
    image_size: usize,
    score_thresh: f64,
    nms_iou: f64,
) -> Vec<Vec<Detection>> {
    let sigmoid = crate::tensor::sigmoid_stable;
    let b = pred.batch;
    let c = pred.num_classes;
    let mut out: Vec<Vec<Detection>> = Vec::with_capacity(b);
    for bi in 0..b {
        let mut cands: Vec<Detection> = Vec::new();
        for lp in &pred.levels {
            let (h, w) = (lp.h, lp.w);
            let stride = lp.level.stride() as f64;
            let prior = lp.level.prior(image_size);
            for gy in 0..h {
                for gx in 0..w {
                    let cell = gy * w + gx;
                    let obj_p = sigmoid(lp.obj[bi * h * w + cell]);
                    let (mut best_c, mut best_p) = (0usize, f64::NEG_INFINITY);
                    for ci in 0..c {
                        let p = sigmoid(lp.cls[(bi * c + ci) * h * w + cell]);
                        if p > best_p {
                            best_p = p;
                            best_c = ci;
                        }
                    }
                    let score = obj_p * best_p;
                    if score <= score_thresh {
                        continue;
                    }
                    let t = |k: usize| lp.boxr[(bi * 4 + k) * h * w + cell];
                    let cx = (gx as f64 + sigmoid(t(0))) * stride;
                    let cy = (gy as f64 + sigmoid(t(1))) * stride;
                    let bw = prior * t(2).clamp(-10.0, 10.0).exp();
                    let bh = prior * t(3).clamp(-10.0, 10.0).exp();
                    let x0 = (cx - bw / 2.0).max(0.0);
                    let y0 = (cy - bh / 2.0).max(0.0);
                    let x1 = (cx + bw / 2.0).min(image_size as f64);
                    let y1 = (cy + bh / 2.0).min(image_size as f64);
                    if x1 - x0 <= 0.0 || y1 - y0 <= 0.0 {
                        continue;
                    }
                    cands.push(Detection {
                        image_id: image_ids[bi],
                        bbox: BBox::new(x0, y0, x1 - x0, y1 - y0, best_c),
                        score,
                    });
                }
            }
        }
        // stable by score, ties keep decode order
        cands.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        let mut kept: Vec<Detection> = Vec::new();
        for d in cands {
            let suppressed = kept
                .iter()
                .any(|k| k.category_id() == d.category_id() && iou(&k.bbox, &d.bbox) > nms_iou);
            if !suppressed {
                kept.push(d);
                if kept.len() >= MAX_DETECTIONS_PER_IMAGE {
                    break;
                }
            }
        }
        out.push(kept);
    }
    out
}

/// One class's ground truth for AP computation.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub image_id: usize,
    pub bbox: BBox,
}

/// All-point interpolated average precision (COCO convention) for one
/// class. Detections are greedily matched highest score first, each ground
/// truth at most once, to the unmatched ground truth with the highest IoU
/// at or above the threshold. Returns `None` when there is no ground truth
/// (the class is excluded from means, not scored zero).
pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], iou_thresh: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap());

    let mut matched = vec![false; gts.len()];
    let mut tp = vec![false; order.len()];
    for (rank, &di) in order.iter().enumerate() {
        let d = &dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if matched[gi] || g.image_id != d.image_id {
                continue;
            }
            let ov = iou(&d.bbox, &g.bbox);
            if ov >= iou_thresh && best.map(|(_, b)| ov > b).unwrap_or(true) {
                best = Some((gi, ov));
            }
        }
        if let Some((gi, _)) = best {
            matched[gi] = true;
            tp[rank] = true;
        }
    }

    let n_gt = gts.len() as f64;
    let mut precisions = Vec::with_capacity(order.len());
    let mut recalls = Vec::with_capacity(order.len());
    let mut n_tp = 0usize;
    for (rank, is_tp) in tp.iter().enumerate() {
        if *is_tp {
            n_tp += 1;
        }
        precisions.push(n_tp as f64 / (rank + 1) as f64);
        recalls.push(n_tp as f64 / n_gt);
    }
    // precision envelope, then area under it at every recall step
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        precisions[i] = precisions[i].max(precisions[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for i in 0..precisions.len() {
        if recalls[i] > prev_r {
            ap += (recalls[i] - prev_r) * precisions[i];
            prev_r = recalls[i];
        }
    }
    Some(ap)
}

/// Mean AP over the classes present in the ground truth.
fn mean_ap_at(dets: &[Detection], gts: &[GroundTruth], num_classes: usize, iou_thresh: f64) -> f64 {
    let mut aps = Vec::new();
    for c in 0..num_classes {
        let class_dets: Vec<Detection> =
            dets.iter().filter(|d| d.category_id() == c).cloned().collect();
        let class_gts: Vec<GroundTruth> =
            gts.iter().filter(|g| g.bbox.category_id == c).cloned().collect();
        if let Some(ap) = average_precision(&class_dets, &class_gts, iou_thresh) {
            aps.push(ap);
        }
    }
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

const COCO_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

fn coco_map(dets: &[Detection], gts: &[GroundTruth], num_classes: usize) -> f64 {
    let s: f64 = COCO_THRESHOLDS.iter().map(|&t| mean_ap_at(dets, gts, num_classes, t)).sum();
    s / COCO_THRESHOLDS.len() as f64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_s: f64,
    pub ap_m: f64,
    pub ap_l: f64,
    pub per_class: BTreeMap<String, f64>,
    pub mean_obj_nobj_cosine: f64,
    pub text_retrieval_top1: f64,
}

fn area_bracket(area: f64) -> usize {
    if area < 32.0 * 32.0 {
        0
    } else if area < 96.0 * 96.0 {
        1
    } else {
        2
    }
}

/// Run inference over the whole dataset and compute detection metrics plus
/// the disentanglement and alignment diagnostics.
pub fn evaluate(
    model: &Model,
    dataset: &Dataset,
    cfg: &EvalConfig,
    encoder: &dyn TextEncoder,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::config("cannot evaluate an empty dataset".to_string()));
    }
    let image_size = model.cfg.image_size;
    let batches = make_batches(dataset, cfg.batch_size, 0, 0, false, encoder)?;

    // per-batch inference in parallel over a frozen model
    let decoded: Vec<Result<Vec<Vec<Detection>>>> = par::map_indexed(batches.len(), |i| {
        let b = &batches[i];
        let pred = model.forward_infer(&b.images, b.batch_size())?;
        Ok(decode(&pred, &b.image_ids, image_size, cfg.score_thresh, cfg.nms_iou))
    });
    let mut dets: Vec<Detection> = Vec::new();
    for d in decoded {
        for img in d? {
            dets.extend(img);
        }
    }
    let mut gts: Vec<GroundTruth> = Vec::new();
    for img in &dataset.images {
        for b in &img.boxes {
            gts.push(GroundTruth { image_id: img.image_id, bbox: b.clone() });
        }
    }

    let num_classes = model.cfg.num_classes;
    let map = coco_map(&dets, &gts, num_classes);
    let ap50 = mean_ap_at(&dets, &gts, num_classes, 0.50);
    let ap75 = mean_ap_at(&dets, &gts, num_classes, 0.75);

    // area splits: ground truth and detections restricted per bracket
    let mut area_aps = [0.0; 3];
    for bracket in 0..3 {
        let bdets: Vec<Detection> =
            dets.iter().filter(|d| area_bracket(d.bbox.area()) == bracket).cloned().collect();
        let bgts: Vec<GroundTruth> =
            gts.iter().filter(|g| area_bracket(g.bbox.area()) == bracket).cloned().collect();
        area_aps[bracket] =
            if bgts.is_empty() { 0.0 } else { coco_map(&bdets, &bgts, num_classes) };
    }

    let mut per_class = BTreeMap::new();
    for (c, name) in dataset.categories.iter().enumerate() {
        let class_dets: Vec<Detection> =
            dets.iter().filter(|d| d.category_id() == c).cloned().collect();
        let class_gts: Vec<GroundTruth> =
            gts.iter().filter(|g| g.bbox.category_id == c).cloned().collect();
        if let Some(ap) = average_precision(&class_dets, &class_gts, 0.50) {
            per_class.insert(name.clone(), ap);
        }
    }

    let (mean_cos, top1) = diagnostics(model, dataset, cfg, encoder)?;

    Ok(EvalReport {
        map,
        ap50,
        ap75,
        ap_s: area_aps[0],
        ap_m: area_aps[1],
        ap_l: area_aps[2],
        per_class,
        mean_obj_nobj_cosine: mean_cos,
        text_retrieval_top1: top1,
    })
}

/// Mean pooled object/non-object cosine over the dataset, and in-batch
/// text-retrieval top-1 accuracy over fixed-size caption batches (ties
/// resolved toward the lowest index).
pub fn diagnostics(
    model: &Model,
    dataset: &Dataset,
    cfg: &EvalConfig,
    encoder: &dyn TextEncoder,
) -> Result<(f64, f64)> {
    // disentanglement diagnostic over plain eval batches
    let batches = make_batches(dataset, cfg.batch_size, 0, 0, false, encoder)?;
    let mut cos_sum = 0.0;
    let mut cos_n = 0usize;
    for b in &batches {
        let mut tape = Tape::new_no_grad();
        let (_, decomposed) = model.forward_features_eval(&mut tape, &b.images, b.batch_size())?;
        if decomposed.is_empty() {
            continue;
        }
        for d in &decomposed {
            let l = disentangle_loss(&mut tape, &d.f_obj, &d.f_nobj, COSINE_EPS, false);
            cos_sum += tape.data(&l)[0] * b.batch_size() as f64;
        }
        cos_n += b.batch_size() * decomposed.len();
    }
    let mean_cos = if cos_n == 0 { 0.0 } else { cos_sum / cos_n as f64 };

    // retrieval over full chunks of the configured batch size
    let rb = cfg.retrieval_batch.min(dataset.len()).max(1);
    let mut hits = 0usize;
    let mut total = 0usize;
    let mut idx = 0usize;
    while idx + rb <= dataset.len() {
        let chunk: Vec<&AnnotatedImage> = dataset.images[idx..idx + rb].iter().collect();
        let mut images = Vec::new();
        let mut captions = Vec::new();
        for img in &chunk {
            images.extend_from_slice(&img.pixels);
            captions.push(caption_record(
                &img.boxes,
                img.width,
                img.height,
                &dataset.categories,
                encoder,
            )?);
        }
        let mut tape = Tape::new_no_grad();
        let fwd = model.forward_diagnostics(&mut tape, &images, rb, &captions)?;
        let obj = tape.data(&fwd.obj_embed).to_vec();
        let l = model.cfg.l;
        for i in 0..rb {
            let u = &obj[i * l..(i + 1) * l];
            let mut best_j = 0usize;
            let mut best = f64::NEG_INFINITY;
            for (j, c) in captions.iter().enumerate() {
                let dot: f64 = u.iter().zip(c.embedding.iter()).map(|(a, b)| a * b).sum();
                let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
                let s = dot / (nu.max(COSINE_EPS) * 1.0);
                if s > best {
                    best = s;
                    best_j = j;
                }
            }
            if best_j == i {
                hits += 1;
            }
            total += 1;
        }
        idx += rb;
    }
    let top1 = if total == 0 { 0.0 } else { hits as f64 / total as f64 };
    Ok((mean_cos, top1))
}

/// For each decomposed level, write the channel-mean absolute activation of
/// both halves as min-max normalized PGM heatmaps, nearest-upsampled to the
/// input size. Returns the number of files written.
pub fn export_activation_maps(model: &Model, images: &[AnnotatedImage], out_dir: &Path) -> Result<usize> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut written = 0usize;
    for img in images {
        let mut tape = Tape::new_no_grad();
        let (_, decomposed) = model.forward_features_eval(&mut tape, &img.pixels, 1)?;
        for d in &decomposed {
            for (half, name) in [(&d.f_obj, "obj"), (&d.f_nobj, "nobj")] {
                let shape = half.shape().to_vec();
                let (c, h, w) = (shape[1], shape[2], shape[3]);
                let data = tape.data(half);
                let mut heat = vec![0.0; h * w];
                for ci in 0..c {
                    for i in 0..h * w {
                        heat[i] += data[ci * h * w + i].abs();
                    }
                }
                for v in heat.iter_mut() {
                    *v /= c as f64;
                }
                let lo = heat.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = heat.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let range = hi - lo;
                let norm: Vec<f64> = if range <= 0.0 {
                    vec![0.0; h * w]
                } else {
                    heat.iter().map(|v| (v - lo) / range).collect()
                };
                // nearest upsample to the input size
                let s = img.width;
                let scale = s / w;
                let mut up = vec![0.0; s * s];
                for y in 0..s {
                    for x in 0..s {
                        up[y * s + x] = norm[(y / scale).min(h - 1) * w + (x / scale).min(w - 1)];
                    }
                }
                let file = out_dir.join(format!("{}_{}_{}.pgm", img.image_id, d.level.name(), name));
                write_pgm(&file, &up, s, s)?;
                written += 1;
            }
        }
    }
    Ok(written)
}

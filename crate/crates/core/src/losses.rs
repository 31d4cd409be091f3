//! Training objectives: the image-text similarity matrix, the contrastive
//! alignment loss, the object/non-object disentanglement penalty, a dense
//! detection loss with its grid target assignment, and the weighted total.

use crate::caption::BBox;
use crate::error::{Error, Result};
use crate::model::{DensePrediction, Level};
use crate::tensor::{Tape, Tensor};

/// Default zero-norm guard for cosine terms.
pub const COSINE_EPS: f64 = 1e-8;

/// Detection loss term weights: objectness, class, box regression.
pub const DET_WEIGHTS: (f64, f64, f64) = (1.0, 1.0, 5.0);

/// All loss components of one step. `total` is built on the tape as
/// `l_det + alpha * l_al + beta * l_ds`, so its gradient is exactly the
/// weighted sum of the component gradients.
pub struct LossBundle {
    pub l_det: Tensor,
    pub l_al: Tensor,
    pub l_ds: Tensor,
    pub alpha: f64,
    pub beta: f64,
    pub total: Tensor,
}

impl LossBundle {
    pub fn values(&self, tape: &Tape) -> LossValues {
        LossValues {
            l_det: tape.data(&self.l_det)[0],
            l_al: tape.data(&self.l_al)[0],
            l_ds: tape.data(&self.l_ds)[0],
            total: tape.data(&self.total)[0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub l_det: f64,
    pub l_al: f64,
    pub l_ds: f64,
    pub total: f64,
}

/// `S[i][j]` = cosine of object embedding `i` against text embedding `j`.
/// The text side is a frozen leaf, so no gradient reaches it.
pub fn similarity_matrix(tape: &mut Tape, obj: &Tensor, text: &Tensor, eps: f64) -> Result<Tensor> {
    if obj.shape().len() != 2 || text.shape().len() != 2 {
        return Err(Error::config("similarity_matrix expects rank-2 inputs".to_string()));
    }
    if obj.shape()[0] != text.shape()[0] {
        return Err(Error::config(format!(
            "similarity_matrix batch sizes differ: {} vs {}",
            obj.shape()[0],
            text.shape()[0]
        )));
    }
    tape.cosine_matrix(obj, text, eps)
}

/// One-directional (image -> text) InfoNCE over a square similarity matrix,
/// computed with a max-shifted log-sum-exp.
pub fn alignment_loss(tape: &mut Tape, s: &Tensor, tau: f64) -> Result<Tensor> {
    if tau <= 0.0 {
        return Err(Error::config(format!("temperature {} must be positive", tau)));
    }
    if s.shape().len() != 2 || s.shape()[0] != s.shape()[1] {
        return Err(Error::config(format!("alignment loss needs a square matrix, got {:?}", s.shape())));
    }
    let scaled = tape.scale(s, 1.0 / tau);
    let lse = tape.logsumexp_rows(&scaled);
    let d = tape.diag(&scaled);
    let per_row = tape.sub(&lse, &d);
    Ok(tape.mean_all(&per_row))
}

/// Symmetric variant: the mean of the image->text and text->image
/// directions.
pub fn alignment_loss_symmetric(tape: &mut Tape, s: &Tensor, tau: f64) -> Result<Tensor> {
    let fwd = alignment_loss(tape, s, tau)?;
    let st = tape.permute(s, &[1, 0]);
    let bwd = alignment_loss(tape, &st, tau)?;
    let sum = tape.add(&fwd, &bwd);
    Ok(tape.scale(&sum, 0.5))
}

/// Cosine between the spatially pooled object and non-object maps, averaged
/// over the batch. Unequal channel counts are zero-padded to match. The
/// `use_abs` variant penalizes anti-correlation too (per batch element).
pub fn disentangle_loss(
    tape: &mut Tape,
    f_obj: &Tensor,
    f_nobj: &Tensor,
    eps: f64,
    use_abs: bool,
) -> Tensor {
    let po = tape.global_avg_pool(f_obj);
    let pn = tape.global_avg_pool(f_nobj);
    let (b, lo) = (po.shape()[0], po.shape()[1]);
    let ln = pn.shape()[1];
    let (po, pn) = if lo < ln {
        let pad = tape.constant(vec![0.0; b * (ln - lo)], &[b, ln - lo]);
        (tape.concat_dim1(&po, &pad), pn)
    } else if ln < lo {
        let pad = tape.constant(vec![0.0; b * (lo - ln)], &[b, lo - ln]);
        (po, tape.concat_dim1(&pn, &pad))
    } else {
        (po, pn)
    };
    let rc = tape.rowwise_cosine(&po, &pn, eps);
    let rc = if use_abs { tape.abs(&rc) } else { rc };
    tape.mean_all(&rc)
}

/// Disentanglement penalty averaged over all decomposed levels; a zero
/// constant when nothing is decomposed.
pub fn disentangle_mean(
    tape: &mut Tape,
    levels: &[crate::model::DecomposedLevel],
    eps: f64,
    use_abs: bool,
) -> Tensor {
    if levels.is_empty() {
        return tape.constant(vec![0.0], &[1]);
    }
    let mut acc: Option<Tensor> = None;
    for d in levels {
        let l = disentangle_loss(tape, &d.f_obj, &d.f_nobj, eps, use_abs);
        acc = Some(match acc {
            None => l,
            Some(a) => tape.add(&a, &l),
        });
    }
    let sum = acc.unwrap();
    tape.scale(&sum, 1.0 / levels.len() as f64)
}

// ── grid targets ───────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct LevelTargets {
    pub level: Level,
    pub h: usize,
    pub w: usize,
    /// `[B,1,h,w]` 0/1 objectness targets.
    pub obj: Vec<f64>,
    /// `[B,C,h,w]` one-hot class targets on positive cells.
    pub cls: Vec<f64>,
    /// `[B,4,h,w]` box targets: in-cell center offsets in (0,1) and log
    /// sizes relative to the level prior.
    pub boxr: Vec<f64>,
    /// `[B,1,h,w]` positive-cell mask.
    pub pos_mask: Vec<f64>,
    pub n_pos: usize,
}

#[derive(Debug, Clone)]
pub struct GridTargets {
    pub batch: usize,
    pub num_classes: usize,
    pub levels: Vec<LevelTargets>,
    /// Boxes dropped because another box claimed the same cell.
    pub skipped: usize,
}

/// Assign each ground-truth box to one cell: the center cell at the level
/// whose prior is nearest the box's geometric-mean size. When two boxes
/// collide on a cell the larger survives and a skip is counted.
pub fn assign_targets(
    boxes_per_image: &[Vec<BBox>],
    image_size: usize,
    num_classes: usize,
) -> GridTargets {
    let batch = boxes_per_image.len();
    let mut levels: Vec<LevelTargets> = Level::ALL
        .iter()
        .map(|&level| {
            let cells = image_size / level.stride();
            LevelTargets {
                level,
                h: cells,
                w: cells,
                obj: vec![0.0; batch * cells * cells],
                cls: vec![0.0; batch * num_classes * cells * cells],
                boxr: vec![0.0; batch * 4 * cells * cells],
                pos_mask: vec![0.0; batch * cells * cells],
                n_pos: 0,
            }
        })
        .collect();
    let mut skipped = 0usize;
    // remembers the area of the box owning each positive cell
    let mut owner_area: Vec<std::collections::HashMap<(usize, usize), f64>> =
        vec![std::collections::HashMap::new(); Level::ALL.len()];

    for (bi, boxes) in boxes_per_image.iter().enumerate() {
        for bx in boxes {
            let gm = (bx.w * bx.h).sqrt();
            let li = Level::ALL
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    let da = (a.prior(image_size) - gm).abs();
                    let db = (b.prior(image_size) - gm).abs();
                    da.partial_cmp(&db).unwrap()
                })
                .map(|(i, _)| i)
                .unwrap();
            let level = Level::ALL[li];
            let stride = level.stride() as f64;
            let cells = image_size / level.stride();
            let (cx, cy) = bx.center();
            let gx = ((cx / stride).floor() as usize).min(cells - 1);
            let gy = ((cy / stride).floor() as usize).min(cells - 1);

            let cell_key = (bi, gy * cells + gx);
            let area = bx.area();
            if let Some(&prev) = owner_area[li].get(&cell_key) {
                if area <= prev {
                    skipped += 1;
                    continue;
                }
                // the previous occupant loses its slot
                skipped += 1;
            }
            owner_area[li].insert(cell_key, area);

            let lt = &mut levels[li];
            let cell = bi * cells * cells + gy * cells + gx;
            if lt.obj[cell] == 0.0 {
                lt.n_pos += 1;
            }
            lt.obj[cell] = 1.0;
            lt.pos_mask[cell] = 1.0;
            // reset class one-hot for this cell before setting the winner
            for c in 0..num_classes {
                lt.cls[(bi * num_classes + c) * cells * cells + gy * cells + gx] = 0.0;
            }
            lt.cls[(bi * num_classes + bx.category_id) * cells * cells + gy * cells + gx] = 1.0;
            let prior = level.prior(image_size);
            let t = [
                cx / stride - gx as f64,
                cy / stride - gy as f64,
                (bx.w / prior).ln(),
                (bx.h / prior).ln(),
            ];
            for (k, v) in t.iter().enumerate() {
                lt.boxr[(bi * 4 + k) * cells * cells + gy * cells + gx] = *v;
            }
        }
    }
    GridTargets { batch, num_classes, levels, skipped }
}

/// Binary cross-entropy on objectness over all cells, binary cross-entropy
/// on class logits and smooth-L1 on box regressors over positive cells;
/// terms averaged per level then summed with weights [`DET_WEIGHTS`].
pub fn detection_loss(tape: &mut Tape, pred: &DensePrediction, targets: &GridTargets) -> Result<Tensor> {
    if pred.levels.len() != targets.levels.len() {
        return Err(Error::config("prediction and target level counts differ".to_string()));
    }
    let (w_obj, w_cls, w_box) = DET_WEIGHTS;
    let mut total: Option<Tensor> = None;
    for (lp, lt) in pred.levels.iter().zip(targets.levels.iter()) {
        if lp.level != lt.level {
            return Err(Error::config("prediction and target levels out of order".to_string()));
        }
        let b = targets.batch;
        let c = targets.num_classes;
        let (hh, ww) = (lt.h, lt.w);
        if lp.obj.shape() != [b, 1, hh, ww] {
            return Err(Error::config(format!(
                "objectness shape {:?} != targets [{},1,{},{}]",
                lp.obj.shape(),
                b,
                hh,
                ww
            )));
        }

        let obj_t = tape.constant(lt.obj.clone(), &[b, 1, hh, ww]);
        let obj_bce = tape.bce_with_logits(&lp.obj, &obj_t);
        let obj_term = tape.mean_all(&obj_bce);
        let mut level_loss = tape.scale(&obj_term, w_obj);

        if lt.n_pos > 0 {
            // class BCE on positive cells
            let cls_t = tape.constant(lt.cls.clone(), &[b, c, hh, ww]);
            let cls_bce = tape.bce_with_logits(&lp.cls, &cls_t);
            let mask_c = expand_mask(&lt.pos_mask, b, c, hh * ww);
            let mask_c = tape.constant(mask_c, &[b, c, hh, ww]);
            let cls_masked = tape.mul(&cls_bce, &mask_c);
            let cls_sum = tape.sum_all(&cls_masked);
            let cls_term = tape.scale(&cls_sum, 1.0 / (lt.n_pos * c) as f64);

            // smooth-L1 on (sigmoid centers, raw log sizes)
            let (ctr_logits, sizes) = tape.split_dim1(&lp.boxr, 2)?;
            let ctr = tape.sigmoid(&ctr_logits);
            let box_pred = tape.concat_dim1(&ctr, &sizes);
            let box_t = tape.constant(lt.boxr.clone(), &[b, 4, hh, ww]);
            let box_l1 = tape.smooth_l1(&box_pred, &box_t);
            let mask_4 = expand_mask(&lt.pos_mask, b, 4, hh * ww);
            let mask_4 = tape.constant(mask_4, &[b, 4, hh, ww]);
            let box_masked = tape.mul(&box_l1, &mask_4);
            let box_sum = tape.sum_all(&box_masked);
            let box_term = tape.scale(&box_sum, 1.0 / (lt.n_pos * 4) as f64);

            let cls_w = tape.scale(&cls_term, w_cls);
            let box_w = tape.scale(&box_term, w_box);
            let lc = tape.add(&level_loss, &cls_w);
            level_loss = tape.add(&lc, &box_w);
        }

        total = Some(match total {
            None => level_loss,
            Some(acc) => tape.add(&acc, &level_loss),
        });
    }
    total.ok_or_else(|| Error::config("no prediction levels".to_string()))
}

fn expand_mask(mask: &[f64], b: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * c * hw];
    for bi in 0..b {
        let src = &mask[bi * hw..(bi + 1) * hw];
        for ci in 0..c {
            out[(bi * c + ci) * hw..(bi * c + ci + 1) * hw].copy_from_slice(src);
        }
    }
    out
}

/// `total = l_det + alpha * l_al + beta * l_ds`, as tape nodes.
pub fn total_loss(
    tape: &mut Tape,
    l_det: Tensor,
    l_al: Tensor,
    l_ds: Tensor,
    alpha: f64,
    beta: f64,
) -> LossBundle {
    let al_w = tape.scale(&l_al, alpha);
    let ds_w = tape.scale(&l_ds, beta);
    let aux = tape.add(&al_w, &ds_w);
    let total = tape.add(&l_det, &aux);
    LossBundle { l_det, l_al, l_ds, alpha, beta, total }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LevelPred;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()
    }

    #[test]
    fn similarity_identity_cases() {
        let mut tape = Tape::new();
        // identical unit rows on both sides -> all ones
        let rows = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let a = tape.leaf(rows.clone(), &[2, 3], true);
        let b = tape.constant(rows, &[2, 3]);
        let s = similarity_matrix(&mut tape, &a, &b, COSINE_EPS).unwrap();
        for v in tape.data(&s) {
            assert!((v - 1.0).abs() < 1e-12);
        }
        // orthonormal matched rows -> identity matrix
        let mut t2 = Tape::new();
        let e = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let a = t2.leaf(e.clone(), &[3, 3], true);
        let b = t2.constant(e, &[3, 3]);
        let s = similarity_matrix(&mut t2, &a, &b, COSINE_EPS).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((t2.data(&s)[i * 3 + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn similarity_matches_explicit_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = randn(&mut rng, 15);
        let b = randn(&mut rng, 15);
        let mut tape = Tape::new();
        let ta = tape.leaf(a.clone(), &[3, 5], true);
        let tb = tape.constant(b.clone(), &[3, 5]);
        let s = similarity_matrix(&mut tape, &ta, &tb, COSINE_EPS).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let u = &a[i * 5..(i + 1) * 5];
                let v = &b[j * 5..(j + 1) * 5];
                let dot: f64 = u.iter().zip(v).map(|(x, y)| x * y).sum();
                let nu: f64 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nv: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                let expect = dot / (nu.max(COSINE_EPS) * nv.max(COSINE_EPS));
                assert!((tape.data(&s)[i * 3 + j] - expect).abs() < 1e-12);
            }
        }
        // text side is frozen
        let loss = tape.mean_all(&s);
        tape.backward(&loss).unwrap();
        assert!(tape.grad(&tb).is_none());
        assert!(tape.grad(&ta).is_some());
    }

    #[test]
    fn alignment_b1_is_exactly_zero() {
        let mut tape = Tape::new();
        let s = tape.leaf(vec![0.73], &[1, 1], true);
        let l = alignment_loss(&mut tape, &s, 0.07).unwrap();
        assert_eq!(tape.data(&l)[0], 0.0);
    }

    #[test]
    fn alignment_constant_matrix_is_log_b() {
        for b in [2usize, 4, 7] {
            for tau in [0.07, 1.0, 3.0] {
                let mut tape = Tape::new();
                let s = tape.leaf(vec![0.42; b * b], &[b, b], true);
                let l = alignment_loss(&mut tape, &s, tau).unwrap();
                assert!(
                    (tape.data(&l)[0] - (b as f64).ln()).abs() < 1e-12,
                    "b={} tau={}",
                    b,
                    tau
                );
            }
        }
    }

    #[test]
    fn alignment_identity_matrix_reference_value() {
        let mut tape = Tape::new();
        let s = tape.leaf(vec![1.0, 0.0, 0.0, 1.0], &[2, 2], true);
        let l = alignment_loss(&mut tape, &s, 1.0).unwrap();
        let expect = (1.0 + (-1.0f64).exp()).ln();
        assert!((tape.data(&l)[0] - expect).abs() < 1e-9);
        assert!((tape.data(&l)[0] - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn alignment_row_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = randn(&mut rng, 16);
        let mut shifted = s.clone();
        for j in 0..4 {
            shifted[2 * 4 + j] += 3.7; // shift an entire row
        }
        let mut t1 = Tape::new();
        let a = t1.leaf(s, &[4, 4], true);
        let l1 = alignment_loss(&mut t1, &a, 0.5).unwrap();
        let mut t2 = Tape::new();
        let b = t2.leaf(shifted, &[4, 4], true);
        let l2 = alignment_loss(&mut t2, &b, 0.5).unwrap();
        assert!((t1.data(&l1)[0] - t2.data(&l2)[0]).abs() < 1e-12);
    }

    #[test]
    fn alignment_rejects_bad_tau() {
        let mut tape = Tape::new();
        let s = tape.leaf(vec![0.0; 4], &[2, 2], true);
        assert!(alignment_loss(&mut tape, &s, 0.0).is_err());
        assert!(alignment_loss(&mut tape, &s, -1.0).is_err());
    }

    fn pooled_pair(tape: &mut Tape, a: Vec<f64>, b: Vec<f64>, c: usize) -> (Tensor, Tensor) {
        let n = a.len() / c;
        let fa = tape.leaf(a, &[1, c, n, 1], true);
        let fb = tape.leaf(b, &[1, c, n, 1], true);
        (fa, fb)
    }

    #[test]
    fn disentangle_trivial_values() {
        let mut tape = Tape::new();
        let base = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let (a, b) = pooled_pair(&mut tape, base.clone(), base.clone(), 3);
        let l = disentangle_loss(&mut tape, &a, &b, COSINE_EPS, false);
        assert!((tape.data(&l)[0] - 1.0).abs() < 1e-12);

        let neg: Vec<f64> = base.iter().map(|v| -v).collect();
        let (a, b) = pooled_pair(&mut tape, base.clone(), neg, 3);
        let l = disentangle_loss(&mut tape, &a, &b, COSINE_EPS, false);
        assert!((tape.data(&l)[0] + 1.0).abs() < 1e-12);

        // orthogonal pooled vectors
        let (a, b) = pooled_pair(&mut tape, vec![1.0, 0.0], vec![0.0, 1.0], 2);
        let l = disentangle_loss(&mut tape, &a, &b, COSINE_EPS, false);
        assert_eq!(tape.data(&l)[0], 0.0);
    }

    #[test]
    fn disentangle_symmetric_and_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = randn(&mut rng, 2 * 4 * 3 * 3);
        let b = randn(&mut rng, 2 * 4 * 3 * 3);
        let scaled: Vec<f64> = a.iter().map(|v| v * 17.5).collect();

        let run = |x: &[f64], y: &[f64]| {
            let mut tape = Tape::new();
            let tx = tape.leaf(x.to_vec(), &[2, 4, 3, 3], true);
            let ty = tape.leaf(y.to_vec(), &[2, 4, 3, 3], true);
            let l = disentangle_loss(&mut tape, &tx, &ty, COSINE_EPS, false);
            tape.data(&l)[0]
        };
        assert!((run(&a, &b) - run(&b, &a)).abs() < 1e-12);
        assert!((run(&a, &b) - run(&scaled, &b)).abs() < 1e-12);
        let v = run(&a, &b);
        assert!((-1.0..=1.0).contains(&v));
    }

    #[test]
    fn disentangle_pads_unequal_halves() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![1.0, 2.0], &[1, 2, 1, 1], true);
        let b = tape.leaf(vec![1.0, 2.0, 0.0], &[1, 3, 1, 1], true);
        let l = disentangle_loss(&mut tape, &a, &b, COSINE_EPS, false);
        // padded a = [1,2,0] equals b -> cosine 1
        assert!((tape.data(&l)[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn assign_nearest_prior_and_center_cell() {
        let boxes = vec![vec![BBox::new(44.0, 44.0, 40.0, 40.0, 1)]];
        let t = assign_targets(&boxes, 128, 3);
        // gm = 40 -> priors (16, 48, 112) -> P4 (stride 16), center (64, 64) -> cell (4, 4)
        assert_eq!(t.levels[1].n_pos, 1);
        assert_eq!(t.levels[0].n_pos, 0);
        assert_eq!(t.levels[2].n_pos, 0);
        let cells = 8;
        assert_eq!(t.levels[1].obj[4 * cells + 4], 1.0);
        let boxr = &t.levels[1].boxr;
        // tx = 64/16 - 4 = 0
        assert_eq!(boxr[4 * cells + 4], 0.0);
        // tw = ln(40/48)
        let tw = boxr[(2) * cells * cells + 4 * cells + 4];
        assert!((tw - (40.0f64 / 48.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn assign_collision_keeps_larger_and_counts_skip() {
        let boxes = vec![vec![
            BBox::new(60.0, 60.0, 8.0, 8.0, 0),
            BBox::new(58.0, 58.0, 12.0, 12.0, 1),
        ]];
        let t = assign_targets(&boxes, 128, 3);
        // both have gm nearest prior 16 (P3, stride 8) and share cell (8, 8)
        assert_eq!(t.skipped, 1);
        assert_eq!(t.levels[0].n_pos, 1);
        let cells = 16;
        // the larger (category 1) wins
        assert_eq!(t.levels[0].cls[(1) * cells * cells + 8 * cells + 8], 1.0);
        assert_eq!(t.levels[0].cls[8 * cells + 8], 0.0);
        let total_pos: usize = t.levels.iter().map(|l| l.n_pos).sum();
        assert!(total_pos <= 2);
    }

    fn zero_pred(tape: &mut Tape, b: usize, c: usize, image: usize) -> DensePrediction {
        let levels = Level::ALL
            .iter()
            .map(|&level| {
                let cells = image / level.stride();
                LevelPred {
                    level,
                    obj: tape.leaf(vec![0.0; b * cells * cells], &[b, 1, cells, cells], true),
                    cls: tape.leaf(vec![0.0; b * c * cells * cells], &[b, c, cells, cells], true),
                    boxr: tape.leaf(vec![0.0; b * 4 * cells * cells], &[b, 4, cells, cells], true),
                }
            })
            .collect();
        DensePrediction { levels }
    }

    #[test]
    fn empty_batch_zero_logits_gives_ln2_per_level() {
        let mut tape = Tape::new();
        let pred = zero_pred(&mut tape, 2, 3, 64);
        let targets = assign_targets(&[vec![], vec![]], 64, 3);
        let l = detection_loss(&mut tape, &pred, &targets).unwrap();
        // three levels, each contributing BCE(0, 0) = ln 2
        assert!((tape.data(&l)[0] - 3.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn perfect_logits_drive_loss_to_zero() {
        let image = 64;
        let boxes = vec![vec![BBox::new(24.0, 24.0, 16.0, 16.0, 2)]];
        let targets = assign_targets(&boxes, image, 3);
        let mut tape = Tape::new();
        let mut levels = Vec::new();
        for lt in &targets.levels {
            let b = 1;
            let cells = lt.h;
            let obj: Vec<f64> = lt.obj.iter().map(|t| if *t > 0.5 { 20.0 } else { -20.0 }).collect();
            let cls: Vec<f64> = lt.cls.iter().map(|t| if *t > 0.5 { 20.0 } else { -20.0 }).collect();
            // invert: centers via logit, sizes raw
            let mut boxr = vec![0.0; b * 4 * cells * cells];
            for i in 0..cells * cells {
                if lt.pos_mask[i] > 0.5 {
                    for k in 0..2 {
                        let t = lt.boxr[k * cells * cells + i].clamp(1e-9, 1.0 - 1e-9);
                        boxr[k * cells * cells + i] = (t / (1.0 - t)).ln();
                    }
                    for k in 2..4 {
                        boxr[k * cells * cells + i] = lt.boxr[k * cells * cells + i];
                    }
                }
            }
            levels.push(LevelPred {
                level: lt.level,
                obj: tape.leaf(obj, &[b, 1, cells, cells], true),
                cls: tape.leaf(cls, &[b, 3, cells, cells], true),
                boxr: tape.leaf(boxr, &[b, 4, cells, cells], true),
            });
        }
        let pred = DensePrediction { levels };
        let l = detection_loss(&mut tape, &pred, &targets).unwrap();
        assert!(tape.data(&l)[0] <= 1e-3, "loss {}", tape.data(&l)[0]);
    }

    #[test]
    fn detection_loss_matches_per_cell_reference() {
        let image = 64;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let boxes = vec![
            vec![BBox::new(10.0, 12.0, 14.0, 10.0, 0), BBox::new(40.0, 36.0, 20.0, 22.0, 2)],
            vec![BBox::new(30.0, 30.0, 9.0, 9.0, 1)],
        ];
        let targets = assign_targets(&boxes, image, 3);
        let mut tape = Tape::new();
        let mut levels = Vec::new();
        let mut raw: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = Vec::new();
        for lt in &targets.levels {
            let cells = lt.h;
            let b = 2;
            let obj = randn(&mut rng, b * cells * cells);
            let cls = randn(&mut rng, b * 3 * cells * cells);
            let boxr = randn(&mut rng, b * 4 * cells * cells);
            raw.push((obj.clone(), cls.clone(), boxr.clone()));
            levels.push(LevelPred {
                level: lt.level,
                obj: tape.leaf(obj, &[b, 1, cells, cells], true),
                cls: tape.leaf(cls, &[b, 3, cells, cells], true),
                boxr: tape.leaf(boxr, &[b, 4, cells, cells], true),
            });
        }
        let pred = DensePrediction { levels };
        let l = detection_loss(&mut tape, &pred, &targets).unwrap();

        // independent per-cell reference
        let sigmoid = |z: f64| 1.0 / (1.0 + (-z).exp());
        let bce = |z: f64, t: f64| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        let sl1 = |p: f64, t: f64| {
            let d = p - t;
            if d.abs() < 1.0 {
                0.5 * d * d
            } else {
                d.abs() - 0.5
            }
        };
        let mut expect = 0.0;
        for (li, lt) in targets.levels.iter().enumerate() {
            let cells = lt.h;
            let (obj, cls, boxr) = &raw[li];
            let mut obj_sum = 0.0;
            for i in 0..obj.len() {
                obj_sum += bce(obj[i], lt.obj[i]);
            }
            expect += obj_sum / obj.len() as f64;
            if lt.n_pos == 0 {
                continue;
            }
            let mut cls_sum = 0.0;
            let mut box_sum = 0.0;
            for bi in 0..2 {
                for i in 0..cells * cells {
                    if lt.pos_mask[bi * cells * cells + i] < 0.5 {
                        continue;
                    }
                    for c in 0..3 {
                        let idx = (bi * 3 + c) * cells * cells + i;
                        cls_sum += bce(cls[idx], lt.cls[idx]);
                    }
                    for k in 0..4 {
                        let idx = (bi * 4 + k) * cells * cells + i;
                        let p = if k < 2 { sigmoid(boxr[idx]) } else { boxr[idx] };
                        box_sum += sl1(p, lt.boxr[idx]);
                    }
                }
            }
            expect += cls_sum / (lt.n_pos * 3) as f64 + 5.0 * box_sum / (lt.n_pos * 4) as f64;
        }
        assert!((tape.data(&l)[0] - expect).abs() < 1e-10, "{} vs {}", tape.data(&l)[0], expect);
    }

    #[test]
    fn total_loss_arithmetic_and_zero_weights() {
        let mut tape = Tape::new();
        let det = tape.leaf(vec![1.0], &[1], true);
        let al = tape.leaf(vec![0.5], &[1], true);
        let ds = tape.leaf(vec![0.2], &[1], true);
        let bundle = total_loss(&mut tape, det, al, ds, 1.0, 1.0);
        assert!((tape.data(&bundle.total)[0] - 1.7).abs() < 1e-15);

        let mut tape = Tape::new();
        let det = tape.leaf(vec![0.83], &[1], true);
        let al = tape.leaf(vec![123.0], &[1], true);
        let ds = tape.leaf(vec![-9.0], &[1], true);
        let bundle = total_loss(&mut tape, det, al, ds, 0.0, 0.0);
        assert_eq!(tape.data(&bundle.total)[0], 0.83);
    }

    #[test]
    fn alignment_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let s = randn(&mut rng, 9);
        let tau = 0.3;
        let f = |v: &[f64]| -> f64 {
            let mut acc = 0.0;
            for i in 0..3 {
                let row: Vec<f64> = (0..3).map(|j| v[i * 3 + j] / tau).collect();
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
                acc += m + z.ln() - row[i];
            }
            acc / 3.0
        };
        let mut tape = Tape::new();
        let ts = tape.leaf(s.clone(), &[3, 3], true);
        let l = alignment_loss(&mut tape, &ts, tau).unwrap();
        tape.backward(&l).unwrap();
        let g = tape.grad(&ts).unwrap();
        let h = 1e-6;
        let mut pert = s.clone();
        for i in 0..9 {
            pert[i] = s[i] + h;
            let fp = f(&pert);
            pert[i] = s[i] - h;
            let fm = f(&pert);
            pert[i] = s[i];
            let n = (fp - fm) / (2.0 * h);
            assert!((g[i] - n).abs() < 1e-8, "{} vs {}", g[i], n);
        }
    }
}

//! Candidate selection, the general-feature decoder, and the task-specific
//! predictor that builds separate classification and box queries.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::geometry::BevConfig;
use crate::nn::{attention, conv3x3, dense, mlp, position_encoding, Extent, ParamSet};
use crate::numerics::{Graph, Tensor};
use crate::scene::ObjectBox;

pub const BOX_DIM: usize = 10;

/// One selected heatmap peak.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub gx: usize,
    pub gy: usize,
    pub class_id: usize,
    pub score: f64,
}

/// Candidates in descending score order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CandidateSet {
    pub items: Vec<Candidate>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Flat BEV rows `gx·n + gy`.
    pub fn rows(&self, n: usize) -> Vec<Option<usize>> {
        self.items.iter().map(|c| Some(c.gx * n + c.gy)).collect()
    }

    pub fn classes(&self) -> Vec<Option<usize>> {
        self.items.iter().map(|c| Some(c.class_id)).collect()
    }

    /// Reorders candidates; `order[k]` is the old index placed at `k`.
    pub fn permuted(&self, order: &[usize]) -> CandidateSet {
        CandidateSet {
            items: order.iter().map(|&i| self.items[i]).collect(),
        }
    }
}

/// Conv, ReLU, conv, sigmoid: `[n², C] → [n², N]` class scores.
pub fn heatmap_head<G: Graph>(g: &mut G, ps: &ParamSet, bf: &G::V, n: usize) -> Result<G::V> {
    let e = Extent::new(n, n);
    let (h, _) = conv3x3(g, ps, "heat.0", bf, e, 1)?;
    let h = g.relu(&h)?;
    let (logits, _) = conv3x3(g, ps, "heat.1", &h, e, 1)?;
    g.sigmoid(&logits)
}

/// Local maxima of the per-cell class maximum, ranked by score with
/// `(gx, gy)` ascending as the tie-break. A cell qualifies when its score is
/// at least that of every in-grid 8-neighbor.
pub fn select_candidates(heat: &Tensor, n: usize, k: usize) -> Result<CandidateSet> {
    if k == 0 {
        return Err(Error::Domain("K must be ≥ 1".into()));
    }
    if heat.rank() != 2 || heat.shape()[0] != n * n {
        return Err(Error::dim(format!("heatmap {:?} is not [{}, N]", heat.shape(), n * n)));
    }
    let best: Vec<(f64, usize)> = (0..n * n)
        .map(|r| {
            heat.row(r)
                .iter()
                .enumerate()
                .fold((f64::NEG_INFINITY, 0), |acc, (c, &v)| if v > acc.0 { (v, c) } else { acc })
        })
        .collect();
    let mut eligible = Vec::new();
    for gx in 0..n {
        for gy in 0..n {
            let s = best[gx * n + gy].0;
            let mut peak = true;
            'ring: for dx in -1isize..=1 {
                for dy in -1isize..=1 {
                    let (x, y) = (gx as isize + dx, gy as isize + dy);
                    if (dx, dy) == (0, 0) || x < 0 || y < 0 || x >= n as isize || y >= n as isize {
                        continue;
                    }
                    if best[x as usize * n + y as usize].0 > s {
                        peak = false;
                        break 'ring;
                    }
                }
            }
            if peak {
                eligible.push(Candidate {
                    gx,
                    gy,
                    class_id: best[gx * n + gy].1,
                    score: s,
                });
            }
        }
    }
    eligible.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then((a.gx, a.gy, a.class_id).cmp(&(b.gx, b.gy, b.class_id)))
    });
    eligible.truncate(k);
    Ok(CandidateSet { items: eligible })
}

/// Constant `[rows, dim]` position encodings of the given cells.
pub fn cell_encodings(cells: &[(usize, usize)], n: usize, dim: usize) -> Tensor {
    let data = cells.iter().flat_map(|&(a, b)| position_encoding(a, b, n, dim)).collect();
    Tensor::new(vec![cells.len(), dim], data).expect("sized")
}

fn all_cells(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|a| (0..n).map(move |b| (a, b))).collect()
}

/// Single-head cross-attention of `queries` over `keys`/`values`.
pub fn cross_attention<G: Graph>(g: &mut G, queries: &G::V, keys: &G::V, values: &G::V) -> Result<(G::V, G::V)> {
    attention(g, queries, keys, values)
}

/// General features `f_g [K, C]` and the attention weights `[K, n²]`.
///
/// Queries start from the fused BEV at each candidate plus a class
/// embedding; position encodings enter queries and keys only.
pub fn decode_general<G: Graph>(g: &mut G, ps: &ParamSet, bf: &G::V, cands: &CandidateSet, n: usize) -> Result<(G::V, G::V)> {
    if cands.is_empty() {
        return Err(Error::Domain("decoder needs at least one candidate".into()));
    }
    let c = g.shape(bf)[1];
    let at_cells = g.gather_rows(bf, &cands.rows(n))?;
    let embed = g.param("decoder.class_embed", ps.get("decoder.class_embed")?);
    let class_rows = g.gather_rows(&embed, &cands.classes())?;
    let q0 = g.add(&at_cells, &class_rows)?;

    let cand_cells: Vec<(usize, usize)> = cands.items.iter().map(|c| (c.gx, c.gy)).collect();
    let pe_q = g.constant(cell_encodings(&cand_cells, n, c));
    let pe_k = g.constant(cell_encodings(&all_cells(n), n, c));
    let qin = g.add(&q0, &pe_q)?;
    let kin = g.add(bf, &pe_k)?;
    let q = dense(g, ps, "decoder.q", &qin)?;
    let k = dense(g, ps, "decoder.k", &kin)?;
    let v = dense(g, ps, "decoder.v", bf)?;
    let (att, weights) = cross_attention(g, &q, &k, &v)?;
    let x = g.add(&q0, &att)?;
    let ffn = mlp(g, ps, "decoder.ffn", &x)?;
    Ok((g.add(&x, &ffn)?, weights))
}

/// Outputs of the modality-specific branch.
pub struct TaskFeatures<V> {
    pub f_cls: V,
    pub f_box: V,
    /// Camera and LiDAR candidate tokens before self-attention.
    pub q_cam: V,
    pub q_lidar: V,
}

fn encoder<G: Graph>(g: &mut G, ps: &ParamSet, name: &str, x: &G::V, n: usize) -> Result<G::V> {
    let e = Extent::new(n, n);
    let (h, _) = conv3x3(g, ps, &format!("{name}0"), x, e, 1)?;
    let h = g.relu(&h)?;
    Ok(conv3x3(g, ps, &format!("{name}1"), &h, e, 1)?.0)
}

/// Class and box features from separately encoded camera and LiDAR BEVs.
///
/// Candidate rows from both encoders form a `2K`-token sequence for one
/// self-attention layer; each candidate's two updated tokens are then
/// concatenated and passed to two unshared FFNs.
pub fn task_specific_features<G: Graph>(
    g: &mut G,
    ps: &ParamSet,
    bc: &G::V,
    bl: &G::V,
    cands: &CandidateSet,
    n: usize,
) -> Result<TaskFeatures<G::V>> {
    let (sc, sl) = (g.shape(bc), g.shape(bl));
    if sc[0] != n * n || sl[0] != n * n {
        return Err(Error::dim(format!(
            "task features: camera BEV {sc:?} and LiDAR BEV {sl:?} must have {} rows",
            n * n
        )));
    }
    let k = cands.len();
    let rows = cands.rows(n);
    let ec = encoder(g, ps, "tsp.enc_cam", bc, n)?;
    let el = encoder(g, ps, "tsp.enc_lidar", bl, n)?;
    let q_cam = g.gather_rows(&ec, &rows)?;
    let q_lidar = g.gather_rows(&el, &rows)?;
    let tokens = g.concat(&[q_cam.clone(), q_lidar.clone()], 0)?;
    let q = dense(g, ps, "tsp.q", &tokens)?;
    let kk = dense(g, ps, "tsp.k", &tokens)?;
    let v = dense(g, ps, "tsp.v", &tokens)?;
    let (att, _) = attention(g, &q, &kk, &v)?;
    let tokens = g.add(&tokens, &att)?;
    let first: Vec<Option<usize>> = (0..k).map(Some).collect();
    let second: Vec<Option<usize>> = (k..2 * k).map(Some).collect();
    let cam_tok = g.gather_rows(&tokens, &first)?;
    let lidar_tok = g.gather_rows(&tokens, &second)?;
    let pair = g.concat(&[cam_tok, lidar_tok], 1)?;
    Ok(TaskFeatures {
        f_cls: mlp(g, ps, "tsp.ffn_cls", &pair)?,
        f_box: mlp(g, ps, "tsp.ffn_box", &pair)?,
        q_cam,
        q_lidar,
    })
}

/// Task query from general and task-specific rows:
/// `ψ([γ_s⊙f_s + β_s, γ_g⊙f_g + β_g])` with each `γ`, `β` a linear map of
/// `[f_g, f_s]`. Layers live under `prefix`.
pub fn task_specific_fuse<G: Graph>(g: &mut G, ps: &ParamSet, prefix: &str, f_g: &G::V, f_s: &G::V) -> Result<G::V> {
    let (a, b) = (g.shape(f_g), g.shape(f_s));
    if a.len() != 2 || b.len() != 2 || a[0] != b[0] {
        return Err(Error::dim(format!("fuser: general {a:?} vs specific {b:?}")));
    }
    let x = g.concat(&[f_g.clone(), f_s.clone()], 1)?;
    let gamma_s = dense(g, ps, &format!("{prefix}.gamma_s"), &x)?;
    let beta_s = dense(g, ps, &format!("{prefix}.beta_s"), &x)?;
    let gamma_g = dense(g, ps, &format!("{prefix}.gamma_g"), &x)?;
    let beta_g = dense(g, ps, &format!("{prefix}.beta_g"), &x)?;
    let ms = g.mul(&gamma_s, f_s)?;
    let ms = g.add(&ms, &beta_s)?;
    let mg = g.mul(&gamma_g, f_g)?;
    let mg = g.add(&mg, &beta_g)?;
    let cat = g.concat(&[ms, mg], 1)?;
    dense(g, ps, &format!("{prefix}.psi"), &cat)
}

/// Class logits `[K, N]` and raw boxes `[K, 10]` from the heads under
/// `prefix` (`head` for the main heads, `aux` for the auxiliary ones).
pub fn subtask_heads<G: Graph>(g: &mut G, ps: &ParamSet, prefix: &str, q_cls: &G::V, q_box: &G::V) -> Result<(G::V, G::V)> {
    if g.shape(q_cls)[0] != g.shape(q_box)[0] {
        return Err(Error::dim("class and box queries differ in row count"));
    }
    let logits = mlp(g, ps, &format!("{prefix}.cls"), q_cls)?;
    let boxes = mlp(g, ps, &format!("{prefix}.box"), q_box)?;
    Ok((logits, boxes))
}

/// Auxiliary heads reading the class and box features directly.
pub fn aux_heads<G: Graph>(g: &mut G, ps: &ParamSet, f_cls: &G::V, f_box: &G::V) -> Result<(G::V, G::V)> {
    subtask_heads(g, ps, "aux", f_cls, f_box)
}

/// A decoded 3D box with its class and confidence.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub center: [f64; 3],
    /// `(l, w, h)`.
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
}

impl Detection {
    /// A detection placed exactly on a ground-truth box.
    pub fn from_box(b: &ObjectBox, score: f64) -> Self {
        Detection {
            class_id: b.class_id,
            score,
            center: b.center,
            size: b.size,
            yaw: b.yaw,
            velocity: b.velocity,
        }
    }
}

/// Regression target of `b` relative to cell `(gx, gy)`:
/// `(dx, dy, z, ln l, ln w, ln h, sin yaw, cos yaw, vx, vy)` with offsets in
/// cell units from the cell center.
pub fn encode_box(b: &ObjectBox, gx: usize, gy: usize, bev: &BevConfig) -> [f64; BOX_DIM] {
    let (cx, cy) = bev.cell_center(gx, gy);
    let (sx, sy) = bev.cell_size();
    [
        (b.center[0] - cx) / sx,
        (b.center[1] - cy) / sy,
        b.center[2],
        b.size[0].ln(),
        b.size[1].ln(),
        b.size[2].ln(),
        b.yaw.sin(),
        b.yaw.cos(),
        b.velocity[0],
        b.velocity[1],
    ]
}

/// Inverse of [`encode_box`]; the yaw pair need not be normalized.
pub fn decode_box(raw: &[f64], gx: usize, gy: usize, bev: &BevConfig) -> ([f64; 3], [f64; 3], f64, [f64; 2]) {
    let (cx, cy) = bev.cell_center(gx, gy);
    let (sx, sy) = bev.cell_size();
    (
        [cx + raw[0] * sx, cy + raw[1] * sy, raw[2]],
        [raw[3].exp(), raw[4].exp(), raw[5].exp()],
        raw[6].atan2(raw[7]),
        [raw[8], raw[9]],
    )
}

/// Detections from head outputs. The class is the logit argmax, falling
/// back to the candidate's heatmap class on ties; the score multiplies the
/// class probability by the heatmap score.
pub fn decode_detections(logits: &Tensor, boxes: &Tensor, cands: &CandidateSet, bev: &BevConfig) -> Result<Vec<Detection>> {
    let k = cands.len();
    if logits.rows() != k || boxes.rows() != k || (k > 0 && boxes.last_dim() != BOX_DIM) {
        return Err(Error::dim(format!(
            "decode: logits {:?}, boxes {:?} for {k} candidates",
            logits.shape(),
            boxes.shape()
        )));
    }
    let mut out = Vec::with_capacity(k);
    for (i, cand) in cands.items.iter().enumerate() {
        let row = logits.row(i);
        let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let class_id = if row.get(cand.class_id) == Some(&top) {
            cand.class_id
        } else {
            row.iter().position(|&v| v == top).unwrap_or(cand.class_id)
        };
        let prob = 1.0 / (1.0 + (-top).exp());
        let (center, size, yaw, velocity) = decode_box(boxes.row(i), cand.gx, cand.gy, bev);
        out.push(Detection {
            class_id,
            score: prob * cand.score,
            center,
            size,
            yaw,
            velocity,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::{init_conv, init_dense, init_mlp};
    use crate::numerics::{finite_diff_check, ops, Eager, Tape, DEFAULT_EPS};
    use crate::oracle::select_candidates_oracle;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn decoder_params(rng: &mut ChaCha8Rng, c: usize, classes: usize) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert("decoder.class_embed", rand_tensor(rng, &[classes, c]));
        for name in ["decoder.q", "decoder.k", "decoder.v"] {
            init_dense(&mut ps, rng, name, c, c, true);
        }
        init_mlp(&mut ps, rng, "decoder.ffn", c, c, c, true);
        ps
    }

    fn fuser_params(rng: &mut ChaCha8Rng, prefix: &str, cg: usize, cs: usize, out: usize) -> ParamSet {
        let mut ps = ParamSet::new();
        init_dense(&mut ps, rng, &format!("{prefix}.gamma_s"), cs, cg + cs, true);
        init_dense(&mut ps, rng, &format!("{prefix}.beta_s"), cs, cg + cs, true);
        init_dense(&mut ps, rng, &format!("{prefix}.gamma_g"), cg, cg + cs, true);
        init_dense(&mut ps, rng, &format!("{prefix}.beta_g"), cg, cg + cs, true);
        init_dense(&mut ps, rng, &format!("{prefix}.psi"), out, cg + cs, true);
        for (k, t) in ps.iter_mut() {
            if k.ends_with("bias") {
                for v in t.data_mut() {
                    *v = rng.gen_range(-0.5..0.5);
                }
            }
        }
        ps
    }

    #[test]
    fn heatmap_head_zero_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        init_conv(&mut ps, &mut rng, "heat.0", 4, 3, true);
        init_conv(&mut ps, &mut rng, "heat.1", 2, 4, true);
        let x = rand_tensor(&mut rng, &[25, 3]).map(|v| 3.0 * v);
        let h = heatmap_head(&mut Eager, &ps, &x, 5).unwrap();
        assert!(h.data().iter().all(|&v| v > 0.0 && v < 1.0));
        ps.zero_all();
        let h = heatmap_head(&mut Eager, &ps, &Tensor::zeros(&[25, 3]), 5).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn candidate_examples() {
        let n = 5;
        let mut heat = Tensor::full(&[25, 3], 0.1);
        heat.set(&[2 * 5 + 3, 1], 0.9);
        let c = select_candidates(&heat, n, 3).unwrap();
        assert_eq!((c.items[0].gx, c.items[0].gy, c.items[0].class_id), (2, 3, 1));
        assert_eq!(c.items[0].score, 0.9);

        let flat = Tensor::full(&[25, 3], 0.4);
        let c = select_candidates(&flat, n, 4).unwrap();
        let cells: Vec<_> = c.items.iter().map(|c| (c.gx, c.gy, c.class_id)).collect();
        assert_eq!(cells, vec![(0, 0, 0), (0, 1, 0), (0, 2, 0), (0, 3, 0)]);
        assert!(select_candidates(&flat, n, 0).is_err());
        assert_eq!(select_candidates(&flat, n, 100).unwrap().len(), 25);
    }

    #[test]
    fn candidates_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for case in 0..200 {
            let mut heat = Tensor::new(vec![256, 3], (0..768).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
            if case % 4 == 0 {
                // Quantize to create plateaus and ties.
                heat = heat.map(|v| (v * 3.0).floor() / 3.0);
            }
            let got = select_candidates(&heat, 16, 10).unwrap();
            assert_eq!(got, select_candidates_oracle(&heat, 16, 10), "case {case}");
            for w in got.items.windows(2) {
                assert!(w[0].score >= w[1].score);
            }
        }
    }

    #[test]
    fn decoder_uniform_input_gives_equal_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ps = decoder_params(&mut rng, 8, 3);
        let bf = Tensor::full(&[16, 8], 0.3);
        let cands = CandidateSet {
            items: (0..4)
                .map(|i| Candidate {
                    gx: i,
                    gy: 3 - i,
                    class_id: 2,
                    score: 0.5,
                })
                .collect(),
        };
        let (fg, w) = decode_general(&mut Eager, &ps, &bf, &cands, 4).unwrap();
        for r in 1..4 {
            for (a, b) in fg.row(0).iter().zip(fg.row(r)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        for r in 0..4 {
            assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_with_peaked_logits_reads_one_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cells = 9;
        let c = 4;
        // Keys orthogonal to the query except at the peak, where the scaled
        // logit is 50.
        let q = Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0]]).unwrap();
        let mut k = Tensor::zeros(&[cells, c]);
        k.set(&[6, 0], 50.0 * (c as f64).sqrt());
        let v = rand_tensor(&mut rng, &[cells, c]);
        let (out, _) = cross_attention(&mut Eager, &q, &k, &v).unwrap();
        for ch in 0..c {
            assert!((out.get(&[0, ch]) - v.get(&[6, ch])).abs() < 1e-12);
        }
    }

    fn tsp_params(rng: &mut ChaCha8Rng, cc: usize, cl: usize, c: usize) -> ParamSet {
        let mut ps = ParamSet::new();
        init_conv(&mut ps, rng, "tsp.enc_cam0", c, cc, true);
        init_conv(&mut ps, rng, "tsp.enc_cam1", c, c, true);
        init_conv(&mut ps, rng, "tsp.enc_lidar0", c, cl, true);
        init_conv(&mut ps, rng, "tsp.enc_lidar1", c, c, true);
        for name in ["tsp.q", "tsp.k", "tsp.v"] {
            init_dense(&mut ps, rng, name, c, c, true);
        }
        init_mlp(&mut ps, rng, "tsp.ffn_cls", 2 * c, c, c, true);
        init_mlp(&mut ps, rng, "tsp.ffn_box", 2 * c, c, c, true);
        ps
    }

    #[test]
    fn task_features_zero_params_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 4;
        let one = CandidateSet {
            items: vec![Candidate {
                gx: 1,
                gy: 2,
                class_id: 0,
                score: 0.7,
            }],
        };
        let mut ps = tsp_params(&mut rng, 3, 3, 5);
        let bc = rand_tensor(&mut rng, &[16, 3]);
        let bl = rand_tensor(&mut rng, &[16, 3]);
        let mut zero = ps.clone();
        zero.zero_all();
        let out = task_specific_features(&mut Eager, &zero, &bc, &bl, &one, n).unwrap();
        assert_eq!(out.f_cls.shape(), &[1, 5]);
        assert!(out.f_cls.data().iter().chain(out.f_box.data()).all(|&v| v == 0.0));

        for (k, v) in ps.clone().iter() {
            if let Some(rest) = k.strip_prefix("tsp.enc_cam") {
                ps.insert(format!("tsp.enc_lidar{rest}"), v.clone());
            }
        }
        let out = task_specific_features(&mut Eager, &ps, &bc, &bc, &one, n).unwrap();
        assert_eq!(out.q_cam, out.q_lidar);
    }

    #[test]
    fn fuser_identities_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (k, cg, cs) = (3, 4, 2);
        let fg = rand_tensor(&mut rng, &[k, cg]);
        let fs = rand_tensor(&mut rng, &[k, cs]);
        let mut ps = fuser_params(&mut rng, "f", cg, cs, cg + cs);
        for (name, value) in [("gamma_s", 1.0), ("gamma_g", 1.0), ("beta_s", 0.0), ("beta_g", 0.0)] {
            let w = ps.get_mut(&format!("f.{name}.weight")).unwrap();
            w.data_mut().fill(0.0);
            ps.get_mut(&format!("f.{name}.bias")).unwrap().data_mut().fill(value);
        }
        let psi = ps.get_mut("f.psi.weight").unwrap();
        psi.data_mut().fill(0.0);
        for i in 0..cg + cs {
            psi.set(&[i, i], 1.0);
        }
        ps.get_mut("f.psi.bias").unwrap().data_mut().fill(0.0);
        let q = task_specific_fuse(&mut Eager, &ps, "f", &fg, &fs).unwrap();
        assert_eq!(q, ops::concat(&[&fs, &fg], 1).unwrap());

        for name in ["gamma_s", "gamma_g", "beta_s", "beta_g"] {
            ps.get_mut(&format!("f.{name}.weight")).unwrap().data_mut().fill(0.0);
            ps.get_mut(&format!("f.{name}.bias")).unwrap().data_mut().fill(0.0);
        }
        let psi = ps.get_mut("f.psi.weight").unwrap();
        for v in psi.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let q = task_specific_fuse(&mut Eager, &ps, "f", &fg, &fs).unwrap();
        assert!(q.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fuser_matches_formula_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (k, cg, cs, out) = (3, 4, 3, 5);
        for _ in 0..5 {
            let fg = rand_tensor(&mut rng, &[k, cg]);
            let fs = rand_tensor(&mut rng, &[k, cs]);
            let ps = fuser_params(&mut rng, "f", cg, cs, out);
            let got = task_specific_fuse(&mut Eager, &ps, "f", &fg, &fs).unwrap();
            let lin = |name: &str, x: &[f64]| -> Vec<f64> {
                let w = ps.get(&format!("f.{name}.weight")).unwrap();
                let b = ps.get(&format!("f.{name}.bias")).unwrap();
                (0..w.shape()[0])
                    .map(|o| b.data()[o] + x.iter().enumerate().map(|(i, v)| w.get(&[o, i]) * v).sum::<f64>())
                    .collect()
            };
            for r in 0..k {
                let x: Vec<f64> = fg.row(r).iter().chain(fs.row(r)).copied().collect();
                let (gs, bs, gg, bg) = (lin("gamma_s", &x), lin("beta_s", &x), lin("gamma_g", &x), lin("beta_g", &x));
                let mut m: Vec<f64> = (0..cs).map(|i| gs[i] * fs.get(&[r, i]) + bs[i]).collect();
                m.extend((0..cg).map(|i| gg[i] * fg.get(&[r, i]) + bg[i]));
                let want = lin("psi", &m);
                for o in 0..out {
                    assert!((got.get(&[r, o]) - want[o]).abs() < 1e-12);
                }
            }
            // Gradient with respect to every parameter tensor.
            let probe = Tensor::new(vec![k, out], (0..k * out).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            for name in ps.names().cloned().collect::<Vec<_>>() {
                let err = finite_diff_check(
                    |t: &mut Tape, p| {
                        t.bind(&name, p);
                        let fgv = t.constant(fg.clone());
                        let fsv = t.constant(fs.clone());
                        let q = task_specific_fuse(t, &ps, "f", &fgv, &fsv)?;
                        let pr = t.constant(probe.clone());
                        let y = t.mul(&q, &pr)?;
                        t.sum(&y)
                    },
                    ps.get(&name).unwrap(),
                    DEFAULT_EPS,
                )
                .unwrap();
                assert!(err < 1e-4, "{name}: {err}");
            }
        }
    }

    #[test]
    fn heads_zero_params_and_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let bev = BevConfig { n: 4, ..BevConfig::default() };
        let mut ps = ParamSet::new();
        init_mlp(&mut ps, &mut rng, "head.cls", 6, 6, 3, true);
        init_mlp(&mut ps, &mut rng, "head.box", 6, 6, BOX_DIM, true);
        ps.zero_all();
        let q = rand_tensor(&mut rng, &[2, 6]);
        let (logits, boxes) = subtask_heads(&mut Eager, &ps, "head", &q, &q).unwrap();
        let cands = CandidateSet {
            items: vec![
                Candidate { gx: 0, gy: 1, class_id: 2, score: 0.8 },
                Candidate { gx: 3, gy: 3, class_id: 1, score: 0.6 },
            ],
        };
        let dets = decode_detections(&logits, &boxes, &cands, &bev).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        for (d, c) in dets.iter().zip(&cands.items) {
            let (x, y) = bev.cell_center(c.gx, c.gy);
            assert_eq!((d.center[0], d.center[1]), (x, y));
            assert_eq!(d.size, [1.0, 1.0, 1.0]);
            // Tied logits keep the heatmap class.
            assert_eq!(d.class_id, c.class_id);
            assert!((d.score - 0.5 * c.score).abs() < 1e-15);
        }
        let empty = decode_detections(&Tensor::zeros(&[0, 3]), &Tensor::zeros(&[0, BOX_DIM]), &CandidateSet::default(), &bev).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn box_encoding_roundtrips() {
        let bev = BevConfig::default();
        let b = ObjectBox {
            center: [1.3, -2.2, 0.4],
            size: [1.2, 0.6, 0.8],
            yaw: 2.5,
            velocity: [0.3, -0.7],
            class_id: 1,
        };
        let (gx, gy) = bev.bev_index(1.3, -2.2).unwrap();
        let raw = encode_box(&b, gx, gy, &bev);
        let (c, s, yaw, v) = decode_box(&raw, gx, gy, &bev);
        for i in 0..3 {
            assert!((c[i] - b.center[i]).abs() < 1e-12 && (s[i] - b.size[i]).abs() < 1e-12);
        }
        assert!((yaw - 2.5).abs() < 1e-12 && v == b.velocity);
    }
}

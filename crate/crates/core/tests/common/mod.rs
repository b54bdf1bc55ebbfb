//! Independent reference implementations used by the integration suites.
#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::Rng;
use relcirc_core::synopsis::{AttnGeometry, AttnLayout, ImageMasks};
use relcirc_core::tensor_io::Tensor;
use relcirc_core::RelationLabel;

/// Rule table over sign/tolerance classes of `(dx, dy)`.
///
/// Rows: `dx < -tol`, `|dx| <= tol`, `dx > tol`.
/// Columns: `dy < -tol`, `-tol <= dy < 0`, `0 <= dy <= tol`, `dy > tol`.
pub fn rule_table(dx: i64, dy: i64, tol: i64) -> RelationLabel {
    use RelationLabel::*;
    const TABLE: [[RelationLabel; 4]; 3] = [
        [UpperLeft, Left, Left, LowerLeft],
        [Above, Above, Below, Below],
        [UpperRight, Right, Right, LowerRight],
    ];
    let row = if dx < -tol {
        0
    } else if dx <= tol {
        1
    } else {
        2
    };
    let col = if dy < -tol {
        0
    } else if dy < 0 {
        1
    } else if dy <= tol {
        2
    } else {
        3
    };
    TABLE[row][col]
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
/// Returns eigenvalues and eigenvectors as columns.
pub fn jacobi_eigen(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut m = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += m[(p, q)] * m[(p, q)];
            }
        }
        let scale: f64 = (0..n).map(|i| m[(i, i)] * m[(i, i)]).sum::<f64>() + off;
        if off <= 1e-30 * scale.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| m[(i, i)]).collect(), v)
}

/// Moore–Penrose pseudoinverse of a symmetric PSD matrix via Jacobi.
pub fn pinv_sym(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let (vals, vecs) = jacobi_eigen(a);
    let vmax = vals.iter().cloned().fold(0.0, f64::max);
    let mut out = DMatrix::<f64>::zeros(n, n);
    for (k, &lam) in vals.iter().enumerate() {
        if lam > 1e-12 * vmax {
            let col = vecs.column(k);
            out += col * col.transpose() / lam;
        }
    }
    out
}

/// `Z (ZᵀZ)⁺ Zᵀ`.
pub fn hat_matrix(z: &DMatrix<f64>) -> DMatrix<f64> {
    if z.ncols() == 0 {
        return DMatrix::zeros(z.nrows(), z.nrows());
    }
    let g = z.transpose() * z;
    z * pinv_sym(&g) * z.transpose()
}

/// `Z⁺ = (ZᵀZ)⁺ Zᵀ`.
pub fn pinv(z: &DMatrix<f64>) -> DMatrix<f64> {
    pinv_sym(&(z.transpose() * z)) * z.transpose()
}

pub fn trace_ap(a: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += a[(i, j)] * p[(j, i)];
        }
    }
    s
}

/// Mean-centered indicator columns, one per level.
pub fn centered_indicators(codes: &[usize], levels: usize) -> DMatrix<f64> {
    let n = codes.len();
    let mut z = DMatrix::<f64>::zeros(n, levels);
    for (i, &c) in codes.iter().enumerate() {
        z[(i, c)] = 1.0;
    }
    for j in 0..levels {
        let mean = z.column(j).sum() / n as f64;
        for i in 0..n {
            z[(i, j)] -= mean;
        }
    }
    z
}

pub fn hcat(n: usize, blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::<f64>::zeros(n, cols);
    let mut c = 0;
    for b in blocks {
        for j in 0..b.ncols() {
            out.set_column(c + j, &b.column(j));
        }
        c += b.ncols();
    }
    out
}

/// Brute-force sums of squares for a main-effects design: total, model,
/// residual, and per factor (marginal, partial).
pub struct SsOracle {
    pub total: f64,
    pub model: f64,
    pub resid: f64,
    pub marginal: Vec<f64>,
    pub partial: Vec<f64>,
}

pub fn ss_oracle(a: &DMatrix<f64>, factors: &[(Vec<usize>, usize)]) -> SsOracle {
    let n = a.nrows();
    let blocks: Vec<DMatrix<f64>> = factors.iter().map(|(c, l)| centered_indicators(c, *l)).collect();
    let p_all = hat_matrix(&hcat(n, &blocks));
    let total = a.trace();
    let model = trace_ap(a, &p_all);
    let resid = trace_ap(a, &(DMatrix::identity(n, n) - &p_all));
    let marginal = blocks.iter().map(|b| trace_ap(a, &hat_matrix(b))).collect();
    let partial = (0..blocks.len())
        .map(|k| {
            let rest: Vec<DMatrix<f64>> = blocks
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != k)
                .map(|(_, b)| b.clone())
                .collect();
            model - trace_ap(a, &hat_matrix(&hcat(n, &rest)))
        })
        .collect();
    SsOracle {
        total,
        model,
        resid,
        marginal,
        partial,
    }
}

/// Flat offset of `(l, t, s, h, i, j)` for a geometry, from explicit strides.
pub fn attn_offset(g: &AttnGeometry, l: usize, t: usize, s: usize, h: usize, i: usize, j: usize) -> usize {
    let (si, sw) = (g.image_tokens, g.text_tokens);
    let s2 = 2 * g.samples;
    let lead = match g.layout {
        AttnLayout::LayerLeading => ((l * g.steps + t) * s2 + s) * g.heads + h,
        AttnLayout::SampleLeading => ((s * g.layers + l) * g.steps + t) * g.heads + h,
    };
    (lead * si + i) * sw + j
}

/// Double-loop template scores: `(cond, uncond)`, each `[L, T, H]`.
pub fn synopsis_oracle(attn: &Tensor, g: &AttnGeometry, img: &ImageMasks, text: &[f32]) -> (Vec<f64>, Vec<f64>) {
    let lth = g.layers * g.steps * g.heads;
    let mut cond = vec![0.0; lth];
    let mut uncond = vec![0.0; lth];
    let used: Vec<usize> = (0..g.samples)
        .filter(|&n| img.masks[n].iter().any(|&v| v != 0.0))
        .collect();
    for l in 0..g.layers {
        for t in 0..g.steps {
            for h in 0..g.heads {
                let k = (l * g.steps + t) * g.heads + h;
                for &n in &used {
                    for (branch, s) in [(0, n), (1, n + g.samples)] {
                        let mut acc = 0.0f64;
                        for i in 0..g.image_tokens {
                            for j in 0..g.text_tokens {
                                let a = attn.data[attn_offset(g, l, t, s, h, i, j)] as f64;
                                acc += a * img.masks[n][i] as f64 * text[j] as f64;
                            }
                        }
                        if branch == 0 {
                            uncond[k] += acc;
                        } else {
                            cond[k] += acc;
                        }
                    }
                }
                cond[k] /= used.len() as f64;
                uncond[k] /= used.len() as f64;
            }
        }
    }
    (cond, uncond)
}

/// Mean, max and argmax over the step axis of an `[L, T, H]` array.
pub fn reduce_oracle(v: &[f64], l: usize, t: usize, h: usize) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let mut mean = vec![0.0; l * h];
    let mut max = vec![f64::NEG_INFINITY; l * h];
    let mut arg = vec![0; l * h];
    for li in 0..l {
        for hi in 0..h {
            for ti in 0..t {
                let x = v[(li * t + ti) * h + hi];
                mean[li * h + hi] += x / t as f64;
                if x > max[li * h + hi] {
                    max[li * h + hi] = x;
                    arg[li * h + hi] = ti;
                }
            }
        }
    }
    (mean, max, arg)
}

/// Fills `out` with rows of `w` random positive values summing to one.
pub fn softmax_rows<R: Rng>(rng: &mut R, out: &mut [f32], w: usize) {
    for row in out.chunks_exact_mut(w) {
        let mut sum = 0.0f64;
        let mut tmp = [0.0f64; 64];
        for (k, _) in row.iter().enumerate() {
            let x: f64 = rng.gen_range(-3.0..3.0);
            tmp[k] = x.exp();
            sum += tmp[k];
        }
        for (k, v) in row.iter_mut().enumerate() {
            *v = (tmp[k] / sum) as f32;
        }
    }
}

pub fn rel_close(a: f64, b: f64, rel: f64, floor: f64) -> bool {
    (a - b).abs() <= rel * b.abs().max(floor)
}

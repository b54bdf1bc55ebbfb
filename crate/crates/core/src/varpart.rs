//! Variance partitioning of embedding sets over categorical factors, additive
//! effect vectors and PCA.
//!
//! Designs are one-hot per factor and column-centered. Projectors onto design
//! column spaces come from a Householder QR with column-norm pivoting; trailing
//! directions with `|R_kk| <= tol * |R_00|` are discarded.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_io::{self, DType};

pub const DEFAULT_RANK_TOL: f64 = 1e-10;
pub const DEFAULT_N_PERM: usize = 100;
/// Symmetry tolerance for dissimilarity matrices.
pub const SYMMETRY_TOL: f64 = 1e-8;
/// Total sums of squares at or below this are treated as degenerate.
pub const DEGENERATE_SS: f64 = 1e-12;

/// Report columns, in output order.
pub const VARPART_COLUMNS: [&str; 11] = [
    "Feature", "Levels", "df_eff", "df_res", "SS_tot", "SSR_marg", "R²_marg", "SSR_part", "R²_part", "η²_p", "p_perm",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Factor {
    pub name: String,
    /// Distinct labels, sorted.
    pub levels: Vec<String>,
    /// Level index per sample.
    pub codes: Vec<usize>,
}

impl Factor {
    pub fn new(name: impl Into<String>, labels: &[String]) -> Self {
        let levels: Vec<String> = labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
        let index: BTreeMap<&str, usize> = levels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        let codes = labels.iter().map(|l| index[l.as_str()]).collect();
        Self {
            name: name.into(),
            levels,
            codes,
        }
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn labels(&self) -> Vec<String> {
        self.codes.iter().map(|&c| self.levels[c].clone()).collect()
    }
}

/// Ordered set of categorical factors over `n` samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorDesign {
    pub n: usize,
    pub factors: Vec<Factor>,
}

impl FactorDesign {
    pub fn new(columns: Vec<(String, Vec<String>)>) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::Input("design needs at least one factor".into()));
        }
        let n = columns[0].1.len();
        if n < 2 {
            return Err(Error::Input(format!("design needs at least 2 samples, got {n}")));
        }
        let mut seen = BTreeSet::new();
        let mut factors = Vec::with_capacity(columns.len());
        for (name, labels) in columns {
            if labels.len() != n {
                return Err(Error::Input(format!(
                    "factor {name:?} has {} labels, expected {n}",
                    labels.len()
                )));
            }
            if !seen.insert(name.clone()) {
                return Err(Error::Input(format!("duplicate factor name {name:?}")));
            }
            factors.push(Factor::new(name, &labels));
        }
        Ok(Self { n, factors })
    }

    /// Adds a factor whose labels join the labels of `parts` with `_`.
    pub fn with_composite(mut self, name: &str, parts: &[&str]) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::Input("composite factor needs at least one part".into()));
        }
        let cols: Vec<Vec<String>> = parts
            .iter()
            .map(|p| {
                self.factor(p)
                    .map(|(_, f)| f.labels())
                    .ok_or_else(|| Error::Input(format!("unknown factor {p:?}")))
            })
            .collect::<Result<_>>()?;
        let labels: Vec<String> = (0..self.n)
            .map(|i| cols.iter().map(|c| c[i].as_str()).collect::<Vec<_>>().join("_"))
            .collect();
        if self.factor(name).is_some() {
            return Err(Error::Input(format!("duplicate factor name {name:?}")));
        }
        self.factors.push(Factor::new(name, &labels));
        Ok(self)
    }

    /// Keeps only the named factors, in the given order.
    pub fn select(&self, names: &[&str]) -> Result<Self> {
        let factors = names
            .iter()
            .map(|n| {
                self.factor(n)
                    .map(|(_, f)| f.clone())
                    .ok_or_else(|| Error::Input(format!("unknown factor {n:?}")))
            })
            .collect::<Result<_>>()?;
        Ok(Self { n: self.n, factors })
    }

    pub fn factor(&self, name: &str) -> Option<(usize, &Factor)> {
        self.factors.iter().enumerate().find(|(_, f)| f.name == name)
    }

    /// Full centered design `Z = [Z_1 | Z_2 | ...]`.
    pub fn design_matrix(&self) -> DMatrix<f64> {
        self.design_excluding(None)
    }

    /// Centered design of every factor except `skip`.
    pub fn design_excluding(&self, skip: Option<usize>) -> DMatrix<f64> {
        let blocks: Vec<DMatrix<f64>> = self
            .factors
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != skip)
            .map(|(_, f)| onehot_centered(&f.codes, f.n_levels()))
            .collect();
        hstack(self.n, &blocks)
    }
}

fn hstack(n: usize, blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let p: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut z = DMatrix::zeros(n, p);
    let mut col = 0;
    for b in blocks {
        z.columns_mut(col, b.ncols()).copy_from(b);
        col += b.ncols();
    }
    z
}

/// One-hot encoding of `codes` over `levels` columns, then column-centered.
pub fn onehot_centered(codes: &[usize], levels: usize) -> DMatrix<f64> {
    let n = codes.len();
    let mut z = DMatrix::zeros(n, levels);
    for (i, &c) in codes.iter().enumerate() {
        z[(i, c)] = 1.0;
    }
    if levels <= 1 {
        tracing::warn!(levels, "single-level factor gives an all-zero design block");
    }
    for mut col in z.column_iter_mut() {
        let mean = col.sum() / n as f64;
        col.add_scalar_mut(-mean);
    }
    z
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GramSource {
    Euclidean,
    Mds,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub a: DMatrix<f64>,
    pub source: GramSource,
}

impl GramMatrix {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.a.trace()
    }
}

fn center_columns(x: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let n = x.nrows() as f64;
    let mean = DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n));
    let mut xc = x.clone();
    for (j, mut col) in xc.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    (xc, mean)
}

/// Double-centering `J M J` for a square matrix.
fn double_center(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows() as f64;
    let row_means: Vec<f64> = m.row_iter().map(|r| r.sum() / n).collect();
    let col_means: Vec<f64> = m.column_iter().map(|c| c.sum() / n).collect();
    let grand = row_means.iter().sum::<f64>() / n;
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] - row_means[i] - col_means[j] + grand)
}

/// `A = (J X)(J X)ᵀ`.
pub fn gram_euclidean(x: &DMatrix<f64>) -> Result<GramMatrix> {
    if x.nrows() < 2 {
        return Err(Error::Input(format!("need at least 2 samples, got {}", x.nrows())));
    }
    let (xc, _) = center_columns(x);
    let a = &xc * xc.transpose();
    Ok(GramMatrix {
        a,
        source: GramSource::Euclidean,
    })
}

/// Classical MDS centering `A = -½ J D∘² J` of a dissimilarity matrix.
pub fn gram_mds(d: &DMatrix<f64>) -> Result<GramMatrix> {
    let n = d.nrows();
    if n != d.ncols() {
        return Err(Error::Input(format!("dissimilarity matrix must be square, got {n}×{}", d.ncols())));
    }
    if n < 2 {
        return Err(Error::Input(format!("need at least 2 samples, got {n}")));
    }
    for i in 0..n {
        if d[(i, i)] != 0.0 {
            return Err(Error::Input(format!("nonzero diagonal entry {} at {i}", d[(i, i)])));
        }
        for j in 0..i {
            if (d[(i, j)] - d[(j, i)]).abs() > SYMMETRY_TOL {
                return Err(Error::Input(format!(
                    "dissimilarity matrix asymmetric at ({i}, {j}): {} vs {}",
                    d[(i, j)],
                    d[(j, i)]
                )));
            }
            if d[(i, j)] < 0.0 || !d[(i, j)].is_finite() {
                return Err(Error::Input(format!("invalid dissimilarity {} at ({i}, {j})", d[(i, j)])));
            }
        }
    }
    let sq = d.map(|v| v * v);
    let mut a = double_center(&sq) * -0.5;
    // symmetrize away round-off from the centering
    a = (&a + a.transpose()) * 0.5;
    Ok(GramMatrix {
        a,
        source: GramSource::Mds,
    })
}

/// Pairwise Euclidean distances between rows.
pub fn pairwise_distances(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    DMatrix::from_fn(n, n, |i, j| (x.row(i) - x.row(j)).norm())
}

/// Orthonormal basis of a column space, from pivoted Householder QR.
#[derive(Debug, Clone)]
pub struct Projector {
    basis: DMatrix<f64>,
}

impl Projector {
    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// Dense `P = Q Qᵀ`.
    pub fn matrix(&self) -> DMatrix<f64> {
        &self.basis * self.basis.transpose()
    }

    /// `tr(A P) = Σ_k q_kᵀ A q_k`.
    pub fn trace_with(&self, a: &DMatrix<f64>) -> f64 {
        let aq = a * &self.basis;
        aq.component_mul(&self.basis).sum()
    }
}

/// Projector onto `col(Z)`, dropping directions with `|R_kk| <= tol · |R_00|`.
pub fn projector(z: &DMatrix<f64>, tol: f64) -> Projector {
    let (n, p) = z.shape();
    let mut a = z.clone();
    let mut reflectors: Vec<DVector<f64>> = Vec::new();
    let mut r00 = 0.0;
    for k in 0..n.min(p) {
        let (pivot, norm) = (k..p)
            .map(|j| (j, a.view((k, j), (n - k, 1)).norm()))
            .fold((k, -1.0), |best, c| if c.1 > best.1 { c } else { best });
        if k == 0 {
            r00 = norm;
        }
        if norm == 0.0 || norm <= tol * r00 {
            break;
        }
        a.swap_columns(k, pivot);
        let mut v: DVector<f64> = a.view((k, k), (n - k, 1)).column(0).into_owned();
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vn = v.norm();
        if vn == 0.0 {
            // column already equals alpha·e_k; reflector is the identity
            v.fill(0.0);
        } else {
            v /= vn;
        }
        let mut block = a.view_mut((k, k), (n - k, p - k));
        let w = block.tr_mul(&v);
        block -= &v * w.transpose() * 2.0;
        reflectors.push(v);
    }
    let rank = reflectors.len();
    let mut q = DMatrix::zeros(n, rank);
    for i in 0..rank {
        q[(i, i)] = 1.0;
    }
    for (k, v) in reflectors.iter().enumerate().rev() {
        let mut block = q.view_mut((k, 0), (n - k, rank));
        let w = block.tr_mul(v);
        block -= v * w.transpose() * 2.0;
    }
    Projector { basis: q }
}

/// `Σ_ij A_ij P_ij`, i.e. `tr(A P)` for symmetric `P`.
pub fn trace_product(a: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    a.component_mul(p).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarPartRow {
    pub feature: String,
    pub levels: usize,
    pub df_eff: usize,
    pub df_res: usize,
    pub ss_tot: f64,
    pub ssr_marg: f64,
    pub r2_marg: f64,
    pub ssr_part: f64,
    pub r2_part: f64,
    pub eta2_p: f64,
    pub p_perm: Option<f64>,
}

/// Four decimals; values that round to zero print without a sign.
fn fixed4(v: f64) -> String {
    let s = format!("{v:.4}");
    if s == "-0.0000" {
        s[1..].to_string()
    } else {
        s
    }
}

impl VarPartRow {
    /// Cells in [`VARPART_COLUMNS`] order; floats at 4 decimals.
    pub fn cells(&self) -> Vec<String> {
        vec![
            self.feature.clone(),
            self.levels.to_string(),
            self.df_eff.to_string(),
            self.df_res.to_string(),
            fixed4(self.ss_tot),
            fixed4(self.ssr_marg),
            fixed4(self.r2_marg),
            fixed4(self.ssr_part),
            fixed4(self.r2_part),
            fixed4(self.eta2_p),
            self.p_perm.map(fixed4).unwrap_or_default(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarPartReport {
    pub n: usize,
    pub rank: usize,
    pub df_res: usize,
    pub ss_total: f64,
    pub ss_model: f64,
    pub ss_resid: f64,
    pub r2_total: f64,
    pub rows: Vec<VarPartRow>,
}

impl VarPartReport {
    pub fn row(&self, feature: &str) -> Option<&VarPartRow> {
        self.rows.iter().find(|r| r.feature == feature)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionOptions {
    pub rank_tol: f64,
    /// Permutations per factor; 0 skips the test.
    pub n_perm: usize,
    pub seed: u64,
}

impl Default for PartitionOptions {
    fn default() -> Self {
        Self {
            rank_tol: DEFAULT_RANK_TOL,
            n_perm: 0,
            seed: 0,
        }
    }
}

fn check_inputs(a: &DMatrix<f64>, design: &FactorDesign) -> Result<f64> {
    if a.nrows() != a.ncols() || a.nrows() != design.n {
        return Err(Error::Input(format!(
            "Gram matrix is {}×{} but the design has {} samples",
            a.nrows(),
            a.ncols(),
            design.n
        )));
    }
    let ss_total = a.trace();
    if !ss_total.is_finite() || ss_total <= DEGENERATE_SS {
        return Err(Error::DegenerateData(format!("total sum of squares is {ss_total}")));
    }
    Ok(ss_total)
}

pub fn partition(a: &DMatrix<f64>, design: &FactorDesign, opts: &PartitionOptions) -> Result<VarPartReport> {
    let ss_total = check_inputs(a, design)?;
    let n = design.n;
    let p_all = projector(&design.design_matrix(), opts.rank_tol);
    let rank = p_all.rank();
    let p_perp = DMatrix::<f64>::identity(n, n) - p_all.matrix();
    let ss_resid = trace_product(a, &p_perp);
    let ss_model = ss_total - ss_resid;
    let df_res = n.saturating_sub(1 + rank);
    let ss_all = p_all.trace_with(a);

    let mut rows = Vec::with_capacity(design.factors.len());
    for (fi, f) in design.factors.iter().enumerate() {
        let marg = projector(&onehot_centered(&f.codes, f.n_levels()), opts.rank_tol);
        let ssr_marg = marg.trace_with(a);
        let minus = projector(&design.design_excluding(Some(fi)), opts.rank_tol);
        let ssr_part = ss_all - minus.trace_with(a);
        let denom = ssr_part + ss_resid;
        let p_perm = if opts.n_perm > 0 {
            Some(permutation_test(a, design, fi, opts.n_perm, opts.seed, opts.rank_tol)?)
        } else {
            None
        };
        rows.push(VarPartRow {
            feature: f.name.clone(),
            levels: f.n_levels(),
            df_eff: f.n_levels().saturating_sub(1),
            df_res,
            ss_tot: ss_total,
            ssr_marg,
            r2_marg: ssr_marg / ss_total,
            ssr_part,
            r2_part: ssr_part / ss_total,
            eta2_p: if denom > 0.0 { ssr_part / denom } else { 0.0 },
            p_perm,
        });
    }
    Ok(VarPartReport {
        n,
        rank,
        df_res,
        ss_total,
        ss_model,
        ss_resid,
        r2_total: ss_model / ss_total,
        rows,
    })
}

/// Label-permutation p-value for the partial SS of factor `factor`:
/// `(1 + #{SS_π ≥ SS_obs}) / (1 + n_perm)`.
///
/// Permutation `k` draws from its own ChaCha stream, so the result does not
/// depend on thread scheduling. Permuted statistics within `1e-10 · SS_total`
/// of the observed one count as ties.
pub fn permutation_test(
    a: &DMatrix<f64>,
    design: &FactorDesign,
    factor: usize,
    n_perm: usize,
    seed: u64,
    rank_tol: f64,
) -> Result<f64> {
    let ss_total = check_inputs(a, design)?;
    if n_perm == 0 {
        return Err(Error::Input("n_perm must be at least 1".into()));
    }
    let f = design
        .factors
        .get(factor)
        .ok_or_else(|| Error::Input(format!("factor index {factor} out of range")))?;
    let z_minus = design.design_excluding(Some(factor));
    let ss_minus = projector(&z_minus, rank_tol).trace_with(a);
    let ss_part = |codes: &[usize]| {
        let z = hstack(design.n, &[z_minus.clone(), onehot_centered(codes, f.n_levels())]);
        projector(&z, rank_tol).trace_with(a) - ss_minus
    };
    let observed = ss_part(&f.codes);
    let tie = 1e-10 * ss_total;
    let exceed = (0..n_perm)
        .into_par_iter()
        .filter(|&k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((factor as u64) << 32) | k as u64);
            let mut codes = f.codes.clone();
            codes.shuffle(&mut rng);
            ss_part(&codes) >= observed - tie
        })
        .count();
    Ok((1 + exceed) as f64 / (1 + n_perm) as f64)
}

/// Per-level effect vectors of one factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorEffects {
    pub name: String,
    pub levels: Vec<String>,
    /// One row of length `d` per level; rows sum to zero.
    pub vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectVectors {
    pub dim: usize,
    pub mean: Vec<f64>,
    pub factors: Vec<FactorEffects>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EffectIndex {
    dim: usize,
    mean_row: usize,
    factors: Vec<EffectIndexEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EffectIndexEntry {
    name: String,
    levels: Vec<String>,
    first_row: usize,
}

impl EffectVectors {
    pub fn get(&self, factor: &str, level: &str) -> Option<&[f64]> {
        let f = self.factors.iter().find(|f| f.name == factor)?;
        let i = f.levels.iter().position(|l| l == level)?;
        Some(&f.vectors[i])
    }

    /// `<stem>.index.json` next to the tensor file.
    pub fn index_path(path: &Path) -> PathBuf {
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        path.with_file_name(format!("{stem}.index.json"))
    }

    /// Writes `[1 + Σ L_f, d]` rows (mean first, then each factor's levels)
    /// plus the index sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut data: Vec<f32> = self.mean.iter().map(|&v| v as f32).collect();
        let mut entries = Vec::new();
        let mut row = 1;
        for f in &self.factors {
            entries.push(EffectIndexEntry {
                name: f.name.clone(),
                levels: f.levels.clone(),
                first_row: row,
            });
            for v in &f.vectors {
                data.extend(v.iter().map(|&x| x as f32));
                row += 1;
            }
        }
        tensor_io::write_tensor(path, &[row, self.dim], DType::F32, &data)?;
        let index = EffectIndex {
            dim: self.dim,
            mean_row: 0,
            factors: entries,
        };
        let ip = Self::index_path(path);
        fs::write(&ip, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io_at(&ip, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let t = tensor_io::read_tensor(path)?;
        let ip = Self::index_path(path);
        let text = fs::read_to_string(&ip).map_err(|e| Error::io_at(&ip, e))?;
        let index: EffectIndex = serde_json::from_str(&text)?;
        if t.dims.len() != 2 || t.dims[1] != index.dim {
            return Err(Error::Input(format!(
                "effect tensor dims {:?} do not match index dim {}",
                t.dims, index.dim
            )));
        }
        let d = index.dim;
        let rows = t.dims[0];
        let row = |r: usize| -> Result<Vec<f64>> {
            if r >= rows {
                return Err(Error::Input(format!("effect index points at row {r} of {rows}")));
            }
            Ok(t.data[r * d..(r + 1) * d].iter().map(|&v| v as f64).collect())
        };
        let mean = row(index.mean_row)?;
        let factors = index
            .factors
            .into_iter()
            .map(|e| {
                let vectors = (0..e.levels.len()).map(|k| row(e.first_row + k)).collect::<Result<_>>()?;
                Ok(FactorEffects {
                    name: e.name,
                    levels: e.levels,
                    vectors,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { dim: d, mean, factors })
    }
}

/// Least-squares effect vectors `B̂ = Z⁺ X_c`, re-centered per factor.
pub fn effect_vectors(x: &DMatrix<f64>, design: &FactorDesign) -> Result<EffectVectors> {
    if x.nrows() != design.n {
        return Err(Error::Input(format!(
            "embedding matrix has {} rows, design has {} samples",
            x.nrows(),
            design.n
        )));
    }
    let (xc, mean) = center_columns(x);
    let z = design.design_matrix();
    let svd = z.svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let pinv = svd
        .pseudo_inverse(DEFAULT_RANK_TOL * smax.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::DegenerateData(e.to_string()))?;
    let b = pinv * xc;
    let d = x.ncols();
    let mut row = 0;
    let mut factors = Vec::with_capacity(design.factors.len());
    for f in &design.factors {
        let l = f.n_levels();
        let block = b.rows(row, l);
        let centre: Vec<f64> = block.column_iter().map(|c| c.sum() / l as f64).collect();
        let vectors = (0..l)
            .map(|i| (0..d).map(|j| block[(i, j)] - centre[j]).collect())
            .collect();
        factors.push(FactorEffects {
            name: f.name.clone(),
            levels: f.levels.clone(),
            vectors,
        });
        row += l;
    }
    Ok(EffectVectors {
        dim: d,
        mean: mean.iter().cloned().collect(),
        factors,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    /// `n × k` projections of the centered data.
    pub scores: DMatrix<f64>,
    /// `d × k` principal directions.
    pub components: DMatrix<f64>,
    /// Fraction of total variance per component, descending.
    pub explained_ratio: Vec<f64>,
    pub mean: DVector<f64>,
}

/// Top-`k` principal components. Each direction's largest-magnitude entry is
/// made positive so results are reproducible.
pub fn pca_project(x: &DMatrix<f64>, k: usize) -> Result<PcaResult> {
    let (n, d) = x.shape();
    if k == 0 || k > n.min(d) {
        return Err(Error::Input(format!("k = {k} outside 1..={}", n.min(d))));
    }
    let (xc, mean) = center_columns(x);
    let svd = xc.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    let s = svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]).then(i.cmp(&j)));
    let total: f64 = s.iter().map(|v| v * v).sum();
    let mut components = DMatrix::zeros(d, k);
    let mut explained_ratio = Vec::with_capacity(k);
    for (c, &i) in order.iter().take(k).enumerate() {
        let mut v: DVector<f64> = v_t.row(i).transpose();
        let lead = v.iter().cloned().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v.neg_mut();
        }
        components.set_column(c, &v);
        explained_ratio.push(if total > 0.0 { s[i] * s[i] / total } else { 0.0 });
    }
    let scores = &xc * &components;
    Ok(PcaResult {
        scores,
        components,
        explained_ratio,
        mean,
    })
}

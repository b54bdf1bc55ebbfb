use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{ArgGroup, Args};
use nalgebra::DMatrix;
use serde::Serialize;
use tracing::info;

use relcirc_core::edit::{apply_edit, edit_delta, EditPlan, FactorLevel, DEFAULT_ALPHA};
use relcirc_core::tensor_io::{self, Tensor};
use relcirc_core::varpart::{
    effect_vectors, gram_euclidean, gram_mds, partition, pca_project, EffectVectors, FactorDesign, PartitionOptions,
    DEFAULT_RANK_TOL, VARPART_COLUMNS,
};

use crate::error::{CliError, Result};
use crate::files;

/// `NAME=a+b`: a factor whose labels join the labels of `a` and `b`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Composite {
    pub name: String,
    pub parts: Vec<String>,
}

impl FromStr for Composite {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (name, rhs) = s.split_once('=').ok_or_else(|| format!("expected NAME=a+b, got {s:?}"))?;
        let parts: Vec<String> = rhs.split('+').map(str::trim).map(String::from).collect();
        if name.trim().is_empty() || parts.iter().any(String::is_empty) {
            return Err(format!("expected NAME=a+b, got {s:?}"));
        }
        Ok(Self {
            name: name.trim().to_string(),
            parts,
        })
    }
}

/// `factor=level`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelArg(pub FactorLevel);

impl FromStr for LevelArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.split_once('=') {
            Some((f, l)) if !f.is_empty() && !l.is_empty() => Ok(Self(FactorLevel::new(f, l))),
            _ => Err(format!("expected FACTOR=LEVEL, got {s:?}")),
        }
    }
}

#[derive(Args, Clone)]
pub struct DesignOpts {
    /// Factor labels: CSV with a header row, or a JSON array of objects
    #[arg(long)]
    pub labels: PathBuf,
    /// Label columns used as factors, in order (default: every column)
    #[arg(long, value_delimiter = ',')]
    pub factors: Vec<String>,
    /// Extra factor built from existing ones, e.g. `rel_shape=relation+shape1`
    #[arg(long = "composite")]
    pub composites: Vec<Composite>,
}

#[derive(Args)]
#[command(group(ArgGroup::new("source").required(true).args(["emb", "distances"])))]
pub struct VarpartArgs {
    /// Representations, [n, d] or [n, L, D] with --token
    #[arg(long)]
    pub emb: Option<PathBuf>,
    /// Token position used when --emb is [n, L, D]
    #[arg(long)]
    pub token: Option<usize>,
    /// Pairwise distance matrix [n, n] (classical MDS route)
    #[arg(long)]
    pub distances: Option<PathBuf>,
    #[command(flatten)]
    pub design: DesignOpts,
    /// Permutations per factor (0 skips the test)
    #[arg(long = "perm", default_value_t = 100)]
    pub n_perm: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Relative pivot tolerance for the design rank
    #[arg(long, default_value_t = DEFAULT_RANK_TOL)]
    pub rank_tol: f64,
    /// Report CSV (default: stdout)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Full report including totals as JSON
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Args)]
pub struct EffectsArgs {
    /// Representations, [n, d] or [n, L, D] with --token
    #[arg(long)]
    pub emb: PathBuf,
    #[arg(long)]
    pub token: Option<usize>,
    #[command(flatten)]
    pub design: DesignOpts,
    /// Effect tensor; the level index goes to `<stem>.index.json`
    #[arg(long)]
    pub out: PathBuf,
    /// Number of principal components to project onto
    #[arg(long)]
    pub pca: Option<usize>,
    /// PCA scores CSV with the factor labels of each row
    #[arg(long, requires = "pca")]
    pub pca_out: Option<PathBuf>,
}

#[derive(Args)]
#[command(group(ArgGroup::new("edit").required(true).args(["plan", "remove"])))]
pub struct EditArgs {
    /// Prompt embedding, [L, D] or [1, L, D]
    #[arg(long)]
    pub emb: PathBuf,
    /// Effect tensor written by `effects`
    #[arg(long)]
    pub effects: PathBuf,
    /// Edit plan JSON instead of the flags below
    #[arg(long, conflicts_with_all = ["token_index", "remove", "add", "alpha"])]
    pub plan: Option<PathBuf>,
    /// Token row to edit
    #[arg(long, requires = "remove")]
    pub token_index: Option<usize>,
    /// Level whose effect is subtracted, e.g. relation=above
    #[arg(long, requires_all = ["add", "token_index"])]
    pub remove: Option<LevelArg>,
    /// Level whose scaled effect is added, e.g. relation=below
    #[arg(long, requires = "remove")]
    pub add: Option<LevelArg>,
    /// Scale on the added effect
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    /// Edited embedding, same shape as the input
    #[arg(long)]
    pub out: PathBuf,
}

fn read_label_table(path: &Path) -> Result<files::Table> {
    let is_json = path.extension().is_some_and(|e| e == "json");
    if !is_json {
        return files::read_csv(path);
    }
    let rows: Vec<BTreeMap<String, serde_json::Value>> = files::read_json(path)?;
    let header: Vec<String> = rows.first().map(|r| r.keys().cloned().collect()).unwrap_or_default();
    let cell = |v: &serde_json::Value| match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    let body = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            header
                .iter()
                .map(|h| {
                    r.get(h)
                        .map(cell)
                        .ok_or_else(|| CliError::Argument(format!("label row {i} has no {h:?}")))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(files::Table { header, rows: body })
}

fn build_design(opts: &DesignOpts) -> Result<FactorDesign> {
    let table = read_label_table(&opts.labels)?;
    let names: Vec<String> = if opts.factors.is_empty() {
        table.header.clone()
    } else {
        opts.factors.clone()
    };
    let columns = names
        .iter()
        .map(|n| {
            table
                .column(n)
                .map(|c| (n.clone(), c))
                .ok_or_else(|| CliError::Argument(format!("no column {n:?} in {}", opts.labels.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut design = FactorDesign::new(columns)?;
    for c in &opts.composites {
        let parts: Vec<&str> = c.parts.iter().map(String::as_str).collect();
        design = design.with_composite(&c.name, &parts)?;
    }
    Ok(design)
}

pub fn run_varpart(a: VarpartArgs) -> Result<()> {
    let design = build_design(&a.design)?;
    let gram = match (&a.emb, &a.distances) {
        (Some(p), _) => gram_euclidean(&files::load_matrix(p, a.token)?)?,
        (None, Some(p)) => gram_mds(&files::load_matrix(p, None)?)?,
        (None, None) => unreachable!("clap requires one source"),
    };
    let opts = PartitionOptions {
        rank_tol: a.rank_tol,
        n_perm: a.n_perm,
        seed: a.seed,
    };
    let report = partition(&gram.a, &design, &opts)?;
    info!(n = report.n, rank = report.rank, r2_total = report.r2_total, "variance partitioned");
    let rows: Vec<Vec<String>> = report.rows.iter().map(|r| r.cells()).collect();
    if let Some(p) = &a.json {
        files::write_json(p, &report)?;
    }
    files::emit(a.out.as_deref(), &files::csv_string(&VARPART_COLUMNS, &rows)?)
}

#[derive(Serialize)]
struct EffectsSummary {
    n: usize,
    dim: usize,
    factors: BTreeMap<String, Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pca_explained_ratio: Option<Vec<f64>>,
}

pub fn run_effects(a: EffectsArgs) -> Result<()> {
    let design = build_design(&a.design)?;
    let x = files::load_matrix(&a.emb, a.token)?;
    let effects = effect_vectors(&x, &design)?;
    effects.save(&a.out)?;

    let mut pca_explained_ratio = None;
    if let Some(k) = a.pca {
        let pca = pca_project(&x, k)?;
        if let Some(p) = &a.pca_out {
            let mut header: Vec<String> = design.factors.iter().map(|f| f.name.clone()).collect();
            header.extend((1..=k).map(|i| format!("pc{i}")));
            let labels: Vec<Vec<String>> = design.factors.iter().map(|f| f.labels()).collect();
            let rows: Vec<Vec<String>> = (0..x.nrows())
                .map(|i| {
                    let mut row: Vec<String> = labels.iter().map(|l| l[i].clone()).collect();
                    row.extend((0..k).map(|c| format!("{:.6}", pca.scores[(i, c)])));
                    row
                })
                .collect();
            let header: Vec<&str> = header.iter().map(String::as_str).collect();
            files::write_text(p, &files::csv_string(&header, &rows)?)?;
        }
        pca_explained_ratio = Some(pca.explained_ratio);
    }
    let summary = EffectsSummary {
        n: x.nrows(),
        dim: effects.dim,
        factors: effects.factors.iter().map(|f| (f.name.clone(), f.levels.clone())).collect(),
        pca_explained_ratio,
    };
    info!(factors = summary.factors.len(), out = %a.out.display(), "effect vectors written");
    print!("{}", files::to_json(&summary)?);
    Ok(())
}

fn load_prompt(path: &Path) -> Result<(Vec<usize>, DMatrix<f64>)> {
    let t = tensor_io::read_tensor(path)?;
    let (l, d) = match t.dims.as_slice() {
        &[l, d] | &[1, l, d] => (l, d),
        dims => {
            return Err(CliError::Argument(format!(
                "{}: expected [L, D] or [1, L, D], got {dims:?}",
                path.display()
            )))
        }
    };
    Ok((t.dims.clone(), DMatrix::from_row_iterator(l, d, t.data.iter().map(|&v| v as f64))))
}

#[derive(Serialize)]
struct EditSummary<'a> {
    plan: &'a EditPlan,
    delta_norm: f64,
}

pub fn run_edit(a: EditArgs) -> Result<()> {
    let plan = match &a.plan {
        Some(p) => files::read_json::<EditPlan>(p)?,
        None => EditPlan {
            token_index: a.token_index.expect("clap requires --token-index"),
            remove: a.remove.clone().expect("clap requires --remove").0,
            add: a.add.clone().expect("clap requires --add").0,
            alpha: a.alpha,
        },
    };
    let (dims, emb) = load_prompt(&a.emb)?;
    let effects = EffectVectors::load(&a.effects)?;
    let edited = apply_edit(&emb, &effects, &plan)?;
    let mut t: Tensor = files::matrix_to_tensor(&edited);
    t.dims = dims;
    files::save_tensor(&a.out, &t)?;
    let delta_norm = edit_delta(&effects, &plan)?.iter().map(|v| v * v).sum::<f64>().sqrt();
    info!(token = plan.token_index, delta_norm, "embedding edited");
    print!("{}", files::to_json(&EditSummary { plan: &plan, delta_norm })?);
    Ok(())
}

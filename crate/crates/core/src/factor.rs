//! Linear-Gaussian factor model whose loadings are the leaf locations of the
//! tree: `Y = Z X + E`, with `X` columns ~ N(0, σ_X² V) and `E` iid N(0, σ_Y²).

use crate::error::{BdtError, Result};
use crate::params::Hyperparams;
use crate::prior::sample_locations;
use crate::tree::{NodeId, NodeKind, Tree};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::io::{Read, Write};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Real data matrix with a mask of observed entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub y: DMatrix<f64>,
    pub observed: DMatrix<bool>,
}

impl Dataset {
    pub fn new(y: DMatrix<f64>) -> Self {
        let observed = DMatrix::from_fn(y.nrows(), y.ncols(), |i, j| y[(i, j)].is_finite());
        Dataset { y, observed }
    }

    pub fn with_mask(y: DMatrix<f64>, observed: DMatrix<bool>) -> Result<Self> {
        if y.shape() != observed.shape() {
            return Err(BdtError::InvalidArgument(format!(
                "data is {:?} but mask is {:?}",
                y.shape(),
                observed.shape()
            )));
        }
        if let Some((i, j)) = (0..y.nrows())
            .flat_map(|i| (0..y.ncols()).map(move |j| (i, j)))
            .find(|&(i, j)| observed[(i, j)] && !y[(i, j)].is_finite())
        {
            return Err(BdtError::InvalidArgument(format!(
                "entry ({i}, {j}) is marked observed but is not finite"
            )));
        }
        Ok(Dataset { y, observed })
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }
    pub fn d(&self) -> usize {
        self.y.ncols()
    }
    pub fn n_observed(&self) -> usize {
        self.observed.iter().filter(|&&b| b).count()
    }

    /// Same values with a different mask.
    pub fn masked(&self, observed: DMatrix<bool>) -> Result<Self> {
        Dataset::with_mask(self.y.clone(), observed)
    }

    /// Parses comma-separated rows. A first row containing a non-numeric
    /// field is taken as a header. Empty fields and `NaN` are missing.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 1;
            let rec = rec.map_err(|e| BdtError::Parse {
                line,
                msg: e.to_string(),
            })?;
            let parsed: std::result::Result<Vec<f64>, String> = rec
                .iter()
                .map(|f| {
                    if f.is_empty() || f.eq_ignore_ascii_case("nan") {
                        Ok(f64::NAN)
                    } else {
                        f.parse::<f64>().map_err(|_| f.to_string())
                    }
                })
                .collect();
            match parsed {
                Ok(r) => {
                    if let Some(first) = rows.first() {
                        if first.len() != r.len() {
                            return Err(BdtError::Parse {
                                line,
                                msg: format!("expected {} fields, found {}", first.len(), r.len()),
                            });
                        }
                    }
                    rows.push(r)
                }
                Err(_) if line == 1 => continue,
                Err(field) => {
                    return Err(BdtError::Parse {
                        line,
                        msg: format!("cannot parse {field:?} as a number"),
                    })
                }
            }
        }
        if rows.is_empty() || rows[0].is_empty() {
            return Err(BdtError::Parse {
                line: 0,
                msg: "no data rows".into(),
            });
        }
        let (n, d) = (rows.len(), rows[0].len());
        Ok(Dataset::new(DMatrix::from_fn(n, d, |i, j| rows[i][j])))
    }

    /// Writes values, leaving unobserved entries empty.
    pub fn to_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for i in 0..self.n() {
            let row: Vec<String> = (0..self.d())
                .map(|j| {
                    if self.observed[(i, j)] {
                        format!("{:?}", self.y[(i, j)])
                    } else {
                        String::new()
                    }
                })
                .collect();
            w.write_record(&row).map_err(|e| BdtError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Posterior over loadings given the tree; one covariance per data column
/// (all equal when the data are fully observed).
#[derive(Clone, Debug)]
pub struct LoadingsPosterior {
    pub mean: DMatrix<f64>,
    pub column_covariance: Vec<DMatrix<f64>>,
}

fn cholesky_with_jitter(a: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(a.clone()) {
        return Ok(c);
    }
    let k = a.nrows().max(1);
    let jitter = 1e-10 * a.trace().abs() / k as f64;
    let mut b = a;
    for i in 0..b.nrows() {
        b[(i, i)] += jitter;
    }
    Cholesky::new(b).ok_or(BdtError::SingularCovariance { jitter })
}

fn chol_logdet(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>()
}

/// Observed-row patterns of the columns: pattern -> (rows, columns).
fn column_patterns(data: &Dataset) -> BTreeMap<Vec<bool>, (Vec<usize>, Vec<usize>)> {
    let mut groups: BTreeMap<Vec<bool>, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for j in 0..data.d() {
        let key: Vec<bool> = data.observed.column(j).iter().copied().collect();
        let entry = groups.entry(key.clone()).or_insert_with(|| {
            let rows = key.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect();
            (rows, Vec::new())
        });
        entry.1.push(j);
    }
    groups
}

fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

/// Gaussian log-density of `y` with covariance given by its Cholesky factor.
fn gaussian_logpdf(chol: &Cholesky<f64, Dyn>, y: &DVector<f64>) -> f64 {
    let n = y.len() as f64;
    let alpha = chol.l().solve_lower_triangular(y).expect("triangular solve");
    -0.5 * (n * LN_2PI + chol_logdet(chol) + alpha.norm_squared())
}

/// Z V Zᵀ without forming either factor: every branch adds its length times
/// the outer product of the per-object leaf counts below it.
pub fn object_covariance(tree: &Tree) -> DMatrix<f64> {
    let n = tree.n_objects();
    let mut out = DMatrix::zeros(n, n);
    let mut below: HashMap<NodeId, DVector<f64>> = HashMap::new();
    for id in tree.postorder() {
        let node = tree.n(id);
        let c = if node.kind() == NodeKind::Leaf {
            DVector::from_fn(n, |i, _| if node.members().contains(i) { 1.0 } else { 0.0 })
        } else {
            node.children()
                .filter_map(|ch| below.remove(&ch))
                .fold(DVector::zeros(n), |acc, v| acc + v)
        };
        if let Some(p) = node.parent() {
            out.ger(node.time() - tree.n(p).time(), &c, &c, 1.0);
        }
        below.insert(id, c);
    }
    out
}

/// σ_X² Z V Zᵀ + σ_Y² I.
pub fn data_covariance(tree: &Tree, hp: &Hyperparams) -> DMatrix<f64> {
    let mut c = object_covariance(tree) * (hp.sigma_x * hp.sigma_x);
    for i in 0..c.nrows() {
        c[(i, i)] += hp.sigma_y * hp.sigma_y;
    }
    c
}

fn noise_only(data: &Dataset, sigma_y: f64) -> f64 {
    let s2 = sigma_y * sigma_y;
    let mut total = 0.0;
    for (i, &y) in data.y.iter().enumerate() {
        if data.observed.as_slice()[i] {
            total += -0.5 * (LN_2PI + s2.ln()) - y * y / (2.0 * s2);
        }
    }
    total
}

/// log p(Y | tree) with loadings integrated out; unobserved entries are
/// marginalized column by column.
pub fn log_marginal_likelihood(data: &Dataset, tree: &Tree, hp: &Hyperparams) -> Result<f64> {
    hp.validate()?;
    if tree.n_objects() != data.n() {
        return Err(BdtError::InvalidArgument(format!(
            "tree has {} objects but data has {} rows",
            tree.n_objects(),
            data.n()
        )));
    }
    let k = tree.count_kind(NodeKind::Leaf);
    if k == 0 {
        return Ok(noise_only(data, hp.sigma_y));
    }
    let s = hp.sigma_y * hp.sigma_y;
    let patterns = column_patterns(data);
    // the low-rank route only pays off for patterns with more rows than leaves
    let low_rank = if patterns.values().any(|(rows, _)| rows.len() > k) {
        let v = tree.mrca_covariance().v;
        Cholesky::new(&v * (hp.sigma_x * hp.sigma_x)).map(|c| (tree.feature_matrix().z, c))
    } else {
        None
    };
    let mut full: Option<DMatrix<f64>> = None;
    let mut total = 0.0;
    for (rows, cols) in patterns.values() {
        let n_o = rows.len();
        if n_o == 0 {
            continue;
        }
        match &low_rank {
            Some((z, la)) if k < n_o => {
                // Woodbury with A = L Lᵀ: |Σ| = s^(n-K) |B|, B = Lᵀ Zᵀ Z L + s I
                let u = select_rows(z, rows) * la.l();
                let mut b = u.transpose() * &u;
                for i in 0..k {
                    b[(i, i)] += s;
                }
                let cb = cholesky_with_jitter(b)?;
                let logdet = (n_o - k) as f64 * s.ln() + chol_logdet(&cb);
                for &j in cols {
                    let y = DVector::from_fn(n_o, |i, _| data.y[(rows[i], j)]);
                    let w = u.transpose() * &y;
                    let bw = cb.solve(&w);
                    let quad = (y.norm_squared() - w.dot(&bw)) / s;
                    total += -0.5 * (n_o as f64 * LN_2PI + logdet + quad);
                }
            }
            _ => {
                let zvz = full.get_or_insert_with(|| object_covariance(tree));
                let mut c = DMatrix::from_fn(n_o, n_o, |a, b| zvz[(rows[a], rows[b])] * hp.sigma_x * hp.sigma_x);
                for i in 0..n_o {
                    c[(i, i)] += s;
                }
                let cc = cholesky_with_jitter(c)?;
                for &j in cols {
                    let y = DVector::from_fn(n_o, |i, _| data.y[(rows[i], j)]);
                    total += gaussian_logpdf(&cc, &y);
                }
            }
        }
    }
    Ok(total)
}

/// The matrix-Gaussian closed form for fully observed data, evaluated through
/// M = V ZᵀZ + (σ_Y²/σ_X²) I.
pub fn log_marginal_likelihood_closed_form(y: &DMatrix<f64>, tree: &Tree, hp: &Hyperparams) -> Result<f64> {
    hp.validate()?;
    let (n, d) = y.shape();
    if tree.n_objects() != n {
        return Err(BdtError::InvalidArgument("row count mismatch".into()));
    }
    let z = tree.feature_matrix().z;
    let k = z.ncols();
    let (sx, sy) = (hp.sigma_x, hp.sigma_y);
    let (nf, kf, df) = (n as f64, k as f64, d as f64);
    let base = -0.5 * nf * df * (2.0 * PI).ln() - (nf - kf) * df * sy.ln() - kf * df * sx.ln();
    if k == 0 {
        return Ok(base - y.norm_squared() / (2.0 * sy * sy));
    }
    let v = tree.mrca_covariance().v;
    let ztz = z.transpose() * &z;
    let mut m = &v * &ztz;
    for i in 0..k {
        m[(i, i)] += sy * sy / (sx * sx);
    }
    let lu = m.clone().lu();
    let logdet: f64 = lu.u().diagonal().iter().map(|x| x.abs().ln()).sum();
    let minv_vzt = lu
        .solve(&(&v * z.transpose()))
        .ok_or(BdtError::SingularCovariance { jitter: 0.0 })?;
    let inner = DMatrix::identity(n, n) - &z * minv_vzt;
    let tr = (y.transpose() * inner * y).trace();
    Ok(base - 0.5 * d as f64 * logdet - tr / (2.0 * sy * sy))
}

/// log p(X | tree): columns of X independent N(0, σ_X² V).
pub fn log_loadings_prior(x: &DMatrix<f64>, tree: &Tree, sigma_x: f64) -> Result<f64> {
    let v = tree.mrca_covariance().v;
    let k = v.nrows();
    if x.nrows() != k {
        return Err(BdtError::InvalidArgument(format!(
            "loadings have {} rows but the tree has {k} leaves",
            x.nrows()
        )));
    }
    if k == 0 {
        return Ok(0.0);
    }
    let c = cholesky_with_jitter(v * (sigma_x * sigma_x))?;
    Ok((0..x.ncols())
        .map(|j| gaussian_logpdf(&c, &x.column(j).into_owned()))
        .sum())
}

/// log p(Y | X, Z) over observed entries.
pub fn log_data_given_loadings(data: &Dataset, tree: &Tree, x: &DMatrix<f64>, sigma_y: f64) -> Result<f64> {
    let z = tree.feature_matrix().z;
    if x.nrows() != z.ncols() || x.ncols() != data.d() {
        return Err(BdtError::InvalidArgument("loadings shape mismatch".into()));
    }
    let mean = z * x;
    let resid = Dataset::with_mask(&data.y - mean, data.observed.clone())?;
    Ok(noise_only(&resid, sigma_y))
}

/// Posterior of the loadings column by column given the observed rows.
pub fn posterior_loadings(data: &Dataset, tree: &Tree, hp: &Hyperparams) -> Result<LoadingsPosterior> {
    hp.validate()?;
    let z = tree.feature_matrix().z;
    let v = tree.mrca_covariance().v;
    let k = v.nrows();
    let r = hp.sigma_y * hp.sigma_y / (hp.sigma_x * hp.sigma_x);
    let mut mean = DMatrix::zeros(k, data.d());
    let mut covs = vec![DMatrix::zeros(k, k); data.d()];
    for (rows, cols) in column_patterns(data).values() {
        let zo = select_rows(&z, rows);
        let mut m = &v * zo.transpose() * &zo;
        for i in 0..k {
            m[(i, i)] += r;
        }
        let q = m.lu().solve(&v).ok_or(BdtError::SingularCovariance { jitter: 0.0 })?;
        let q = (&q + q.transpose()) * 0.5;
        for &j in cols {
            let y = DVector::from_fn(rows.len(), |i, _| data.y[(rows[i], j)]);
            mean.set_column(j, &(&q * zo.transpose() * y));
            covs[j] = &q * (hp.sigma_y * hp.sigma_y);
        }
    }
    Ok(LoadingsPosterior {
        mean,
        column_covariance: covs,
    })
}

/// log p(X | tree, Y).
pub fn log_loadings_posterior(x: &DMatrix<f64>, data: &Dataset, tree: &Tree, hp: &Hyperparams) -> Result<f64> {
    let post = posterior_loadings(data, tree, hp)?;
    if x.shape() != post.mean.shape() {
        return Err(BdtError::InvalidArgument("loadings shape mismatch".into()));
    }
    let mut total = 0.0;
    for j in 0..x.ncols() {
        if post.mean.nrows() == 0 {
            break;
        }
        let c = cholesky_with_jitter(post.column_covariance[j].clone())?;
        let diff = x.column(j) - post.mean.column(j);
        total += gaussian_logpdf(&c, &diff);
    }
    Ok(total)
}

/// Draws loadings from their prior and data given them. Returns (data, X).
pub fn sample_data<R: Rng + ?Sized>(
    tree: &Tree,
    hp: &Hyperparams,
    dim: usize,
    rng: &mut R,
) -> Result<(Dataset, DMatrix<f64>)> {
    let locs = sample_locations(tree, hp.sigma_x, dim, rng)?;
    let fm = tree.feature_matrix();
    let x = DMatrix::from_fn(fm.n_features(), dim, |k, j| locs[&fm.leaf_order[k]][j]);
    let mut y = &fm.z * &x;
    for v in y.iter_mut() {
        *v += hp.sigma_y * rng.sample::<f64, _>(StandardNormal);
    }
    Ok((Dataset::new(y), x))
}

/// Log posterior-predictive density of the held-out entries: for each sample
/// the held-out entries are conditioned on the training entries column by
/// column, and the densities are averaged over samples.
pub fn predictive_log_density(data: &Dataset, heldout: &DMatrix<bool>, samples: &[(Tree, Hyperparams)]) -> Result<f64> {
    if samples.is_empty() {
        return Err(BdtError::InvalidArgument("no posterior samples".into()));
    }
    if heldout.shape() != data.y.shape() {
        return Err(BdtError::InvalidArgument("held-out mask shape mismatch".into()));
    }
    if data.observed.iter().zip(heldout.iter()).any(|(&a, &b)| a && b) {
        return Err(BdtError::InvalidArgument(
            "held-out entries overlap the training entries".into(),
        ));
    }
    if heldout.iter().zip(data.y.iter()).any(|(&h, y)| h && !y.is_finite()) {
        return Err(BdtError::InvalidArgument("held-out entry has no value".into()));
    }
    let logs: Vec<f64> = samples
        .iter()
        .map(|(tree, hp)| sample_heldout_density(data, heldout, tree, hp))
        .collect::<Result<_>>()?;
    Ok(log_mean_exp(&logs))
}

/// Marks `round(fraction × observed)` observed entries, chosen uniformly
/// without replacement, as held out.
pub fn holdout_mask<R: Rng + ?Sized>(data: &Dataset, fraction: f64, rng: &mut R) -> Result<DMatrix<bool>> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(BdtError::InvalidArgument(format!(
            "held-out fraction {fraction} not in [0, 1)"
        )));
    }
    let cells: Vec<usize> = (0..data.y.len()).filter(|&i| data.observed.as_slice()[i]).collect();
    let k = (fraction * cells.len() as f64).round() as usize;
    let mut mask = DMatrix::from_element(data.n(), data.d(), false);
    for i in rand::seq::index::sample(rng, cells.len(), k) {
        mask.as_mut_slice()[cells[i]] = true;
    }
    Ok(mask)
}

/// Training set and held-out mask for a split.
pub fn split_heldout<R: Rng + ?Sized>(data: &Dataset, fraction: f64, rng: &mut R) -> Result<(Dataset, DMatrix<bool>)> {
    let heldout = holdout_mask(data, fraction, rng)?;
    let train = data.masked(data.observed.zip_map(&heldout, |o, h| o && !h))?;
    Ok((train, heldout))
}

/// Held-out log-density under the noise-only model, with σ_Y² estimated by
/// the mean square of the training entries.
pub fn noise_baseline_log_density(train: &Dataset, heldout: &DMatrix<bool>) -> Result<f64> {
    let n = train.n_observed();
    if n == 0 {
        return Err(BdtError::InvalidArgument("no training entries".into()));
    }
    let s2 = train
        .y
        .iter()
        .zip(train.observed.iter())
        .filter(|(_, &o)| o)
        .map(|(y, _)| y * y)
        .sum::<f64>()
        / n as f64;
    Ok(train
        .y
        .iter()
        .zip(heldout.iter())
        .filter(|(_, &h)| h)
        .map(|(y, _)| -0.5 * (LN_2PI + s2.ln()) - y * y / (2.0 * s2))
        .sum())
}

pub(crate) fn log_mean_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + (xs.iter().map(|x| (x - m).exp()).sum::<f64>() / xs.len() as f64).ln()
}

fn sample_heldout_density(data: &Dataset, heldout: &DMatrix<bool>, tree: &Tree, hp: &Hyperparams) -> Result<f64> {
    let cov = data_covariance(tree, hp);
    let mut total = 0.0;
    for j in 0..data.d() {
        let train: Vec<usize> = (0..data.n()).filter(|&i| data.observed[(i, j)]).collect();
        let both: Vec<usize> = (0..data.n())
            .filter(|&i| data.observed[(i, j)] || heldout[(i, j)])
            .collect();
        if both.len() == train.len() {
            continue;
        }
        total += subset_logpdf(&cov, &both, data, j)? - subset_logpdf(&cov, &train, data, j)?;
    }
    Ok(total)
}

fn subset_logpdf(cov: &DMatrix<f64>, rows: &[usize], data: &Dataset, j: usize) -> Result<f64> {
    if rows.is_empty() {
        return Ok(0.0);
    }
    let c = DMatrix::from_fn(rows.len(), rows.len(), |a, b| cov[(rows[a], rows[b])]);
    let chol = cholesky_with_jitter(c)?;
    let y = DVector::from_fn(rows.len(), |i, _| data.y[(rows[i], j)]);
    Ok(gaussian_logpdf(&chol, &y))
}

//! Dataset generation and the on-disk data dialect.
//!
//! Four fixed desk-scale specs cover the estimator ladder: a well-separated
//! isotropic mixture for the EM path, a linear-Gaussian model whose
//! posterior and marginal are closed form (the oracle for every bound
//! check), a bimodal cloud for generative sampling, and a one-dimensional
//! AR(1) stream as a pipeline sanity source.
//!
//! Data files are CSV under a strict dialect — comma separator, `.`
//! decimal, `\n` line endings, UTF-8, no quoting — with header
//! `dim_0..dim_{d−1}`. Every dataset carries a sidecar (same path with a
//! `.meta` extension, flat INI) recording the spec, seed, and the exact
//! true parameters used, so oracle comparisons never have to guess.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::config::Ini;
use super::HarnessError;
use crate::models::{GaussianMixtureModel, LinearGaussianModel};
use crate::numkit::{Matrix, RngStream, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSpec {
    Gmm2d,
    LinearGaussian,
    TwoGaussians2d,
    ArSanity,
}

impl DataSpec {
    pub fn parse(s: &str) -> Result<DataSpec, HarnessError> {
        match s {
            "gmm2d" => Ok(DataSpec::Gmm2d),
            "linear_gaussian" => Ok(DataSpec::LinearGaussian),
            "two_gaussians_2d" => Ok(DataSpec::TwoGaussians2d),
            "ar_sanity" => Ok(DataSpec::ArSanity),
            other => Err(HarnessError::Config(format!(
                "unknown data spec `{other}`; expected gmm2d, linear_gaussian, two_gaussians_2d, or ar_sanity"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DataSpec::Gmm2d => "gmm2d",
            DataSpec::LinearGaussian => "linear_gaussian",
            DataSpec::TwoGaussians2d => "two_gaussians_2d",
            DataSpec::ArSanity => "ar_sanity",
        }
    }

    pub fn data_dim(&self) -> usize {
        match self {
            DataSpec::Gmm2d | DataSpec::TwoGaussians2d => 2,
            DataSpec::LinearGaussian => 3,
            DataSpec::ArSanity => 1,
        }
    }
}

/// The exact generative parameters behind a dataset.
#[derive(Clone, Debug, PartialEq)]
pub enum Truth {
    Mixture(GaussianMixtureModel),
    LinearGaussian(LinearGaussianModel),
    Ar { rho: f64 },
}

fn vec2(a: f64, b: f64) -> Vector {
    Vector::from_column_slice(&[a, b])
}

/// Fixed true parameters for each spec.
pub fn truth_for(spec: DataSpec) -> Truth {
    match spec {
        DataSpec::Gmm2d => Truth::Mixture(
            GaussianMixtureModel::new(
                vec![vec2(-2.0, -1.0), vec2(2.0, 1.5)],
                vec![1.0, 0.6],
                vec![0.6, 0.4],
            )
            .expect("fixed mixture parameters are valid"),
        ),
        DataSpec::TwoGaussians2d => Truth::Mixture(
            GaussianMixtureModel::new(
                vec![vec2(1.5, -0.5), vec2(-1.5, 1.0)],
                vec![0.09, 0.09],
                vec![0.6, 0.4],
            )
            .expect("fixed mixture parameters are valid"),
        ),
        DataSpec::LinearGaussian => Truth::LinearGaussian(
            LinearGaussianModel::new(
                Matrix::from_column_slice(3, 1, &[0.9, -0.6, 0.3]),
                Vector::from_column_slice(&[0.5, -0.2, 0.1]),
                0.25,
            )
            .expect("fixed linear-Gaussian parameters are valid"),
        ),
        DataSpec::ArSanity => Truth::Ar { rho: 0.8 },
    }
}

/// Draws `n` rows under the spec's fixed truth. The stream is consumed in
/// row order, so a dataset is a pure function of (spec, n, seed).
pub fn gen_data(spec: DataSpec, n: usize, seed: u64) -> Result<(Vec<Vector>, Truth), HarnessError> {
    if n == 0 {
        return Err(HarnessError::Config(
            "dataset generation needs n >= 1".into(),
        ));
    }
    let truth = truth_for(spec);
    let mut rng = RngStream::new(seed, super::STREAM_DATA);
    let data = match &truth {
        Truth::Mixture(m) => (0..n)
            .map(|_| {
                let j = rng.categorical(&m.weights);
                &m.means[j] + rng.sample_std_normal(m.dim()) * m.variances[j].sqrt()
            })
            .collect(),
        Truth::LinearGaussian(m) => (0..n)
            .map(|_| {
                let z = rng.sample_std_normal(m.latent_dim());
                m.offset()
                    + m.loading() * z
                    + rng.sample_std_normal(m.data_dim()) * m.noise_var().sqrt()
            })
            .collect(),
        Truth::Ar { rho } => {
            let mut x = rng.standard_normal();
            let innovation = (1.0 - rho * rho).sqrt();
            (0..n)
                .map(|i| {
                    if i > 0 {
                        x = rho * x + innovation * rng.standard_normal();
                    }
                    Vector::from_element(1, x)
                })
                .collect()
        }
    };
    Ok((data, truth))
}

/// `data.csv` → `data.meta`.
pub fn sidecar_path(data_path: &Path) -> PathBuf {
    data_path.with_extension("meta")
}

pub fn write_data_csv(path: &Path, d: usize, data: &[Vector]) -> Result<(), HarnessError> {
    let mut out = String::new();
    let header: Vec<String> = (0..d).map(|j| format!("dim_{j}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in data {
        assert_eq!(row.len(), d, "row width does not match header");
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{v}").expect("writing to a string cannot fail");
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_data_csv(path: &Path) -> Result<Vec<Vector>, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        HarnessError::Config(format!("cannot read dataset {}: {e}", path.display()))
    })?;
    let bad = |msg: String| HarnessError::Config(format!("{}: {msg}", path.display()));
    if text.contains('"') || text.contains('\r') {
        return Err(bad("dataset dialect forbids quotes and CR line endings".into()));
    }
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty dataset file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    for (j, name) in cols.iter().enumerate() {
        if *name != format!("dim_{j}") {
            return Err(bad(format!(
                "header column {j} is `{name}`, expected `dim_{j}`"
            )));
        }
    }
    let d = cols.len();
    let mut data = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d {
            return Err(bad(format!(
                "row {} has {} fields, expected {d}",
                i + 1,
                fields.len()
            )));
        }
        let mut row = Vector::zeros(d);
        for (j, f) in fields.iter().enumerate() {
            let v: f64 = f
                .parse()
                .map_err(|_| bad(format!("row {} field {j}: `{f}` is not a number", i + 1)))?;
            if !v.is_finite() {
                return Err(bad(format!("row {} field {j} is not finite", i + 1)));
            }
            row[j] = v;
        }
        data.push(row);
    }
    Ok(data)
}

fn fmt_slice(values: impl IntoIterator<Item = f64>) -> String {
    values
        .into_iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn write_sidecar(
    path: &Path,
    spec: DataSpec,
    n: usize,
    seed: u64,
    truth: &Truth,
) -> Result<(), HarnessError> {
    let mut out = String::new();
    let _ = writeln!(out, "[dataset]");
    let _ = writeln!(out, "spec = {}", spec.name());
    let _ = writeln!(out, "n = {n}");
    let _ = writeln!(out, "seed = {seed}");
    let _ = writeln!(out, "d = {}", spec.data_dim());
    let _ = writeln!(out);
    let _ = writeln!(out, "[truth]");
    match truth {
        Truth::Mixture(m) => {
            let _ = writeln!(out, "k = {}", m.n_components());
            let _ = writeln!(out, "weights = {}", fmt_slice(m.weights.iter().copied()));
            for (j, mean) in m.means.iter().enumerate() {
                let _ = writeln!(out, "mean_{j} = {}", fmt_slice(mean.iter().copied()));
            }
            let _ = writeln!(out, "variances = {}", fmt_slice(m.variances.iter().copied()));
            let mut mix_mean = Vector::zeros(m.dim());
            for (w, mean) in m.weights.iter().zip(&m.means) {
                mix_mean += mean * *w;
            }
            let _ = writeln!(out, "mixture_mean = {}", fmt_slice(mix_mean.iter().copied()));
        }
        Truth::LinearGaussian(m) => {
            let _ = writeln!(out, "k = {}", m.latent_dim());
            let _ = writeln!(
                out,
                "w = {}",
                fmt_slice(m.loading().transpose().iter().copied())
            );
            let _ = writeln!(out, "mu = {}", fmt_slice(m.offset().iter().copied()));
            let _ = writeln!(out, "sigma2 = {}", m.noise_var());
        }
        Truth::Ar { rho } => {
            let _ = writeln!(out, "rho = {rho}");
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Spec, generation seed, and exact truth from a sidecar file.
pub fn read_sidecar(path: &Path) -> Result<(DataSpec, u64, Truth), HarnessError> {
    let ini = Ini::from_file(path)?;
    ini.check_sections(&["dataset", "truth"])?;
    let mut ds = ini.reader("dataset");
    let spec = DataSpec::parse(ds.str_req("spec")?)?;
    let _n = ds.usize_req("n")?;
    let seed = ds
        .opt_u64("seed")?
        .ok_or_else(|| HarnessError::Config("[dataset] is missing key `seed`".into()))?;
    let d = ds.usize_req("d")?;
    ds.finish()?;

    let mut tr = ini.reader("truth");
    let truth = match spec {
        DataSpec::Gmm2d | DataSpec::TwoGaussians2d => {
            let k = tr.usize_req("k")?;
            let weights = tr.f64_list_req("weights")?;
            let mut means = Vec::with_capacity(k);
            for j in 0..k {
                let m = tr.f64_list_req(&format!("mean_{j}"))?;
                means.push(Vector::from_column_slice(&m));
            }
            let variances = tr.f64_list_req("variances")?;
            let _ = tr.opt_f64_list("mixture_mean")?;
            Truth::Mixture(
                GaussianMixtureModel::new(means, variances, weights)
                    .map_err(|e| HarnessError::Config(format!("invalid sidecar truth: {e}")))?,
            )
        }
        DataSpec::LinearGaussian => {
            let k = tr.usize_req("k")?;
            let w_flat = tr.f64_list_req("w")?;
            if w_flat.len() != d * k {
                return Err(HarnessError::Config(format!(
                    "sidecar w has {} entries, expected {}",
                    w_flat.len(),
                    d * k
                )));
            }
            let w = Matrix::from_row_slice(d, k, &w_flat);
            let mu = Vector::from_column_slice(&tr.f64_list_req("mu")?);
            let sigma2 = tr
                .opt_f64("sigma2")?
                .ok_or_else(|| HarnessError::Config("[truth] is missing key `sigma2`".into()))?;
            Truth::LinearGaussian(
                LinearGaussianModel::new(w, mu, sigma2)
                    .map_err(|e| HarnessError::Config(format!("invalid sidecar truth: {e}")))?,
            )
        }
        DataSpec::ArSanity => Truth::Ar {
            rho: tr
                .opt_f64("rho")?
                .ok_or_else(|| HarnessError::Config("[truth] is missing key `rho`".into()))?,
        },
    };
    tr.finish()?;
    Ok((spec, seed, truth))
}

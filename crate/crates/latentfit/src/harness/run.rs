//! Training, evaluation, and sampling dispatch.
//!
//! A run is a pure function of (config, dataset, seed): every stochastic
//! step draws from substreams derived deterministically from the run seed,
//! so repeating a run reproduces its checkpoint and metrics (modulo the
//! measured `wall_ms` column) bit for bit.
//!
//! The estimator capability matrix is enforced here with explicit errors:
//! `em` needs the mixture's exactly solvable E-step, `mcem` needs an
//! exactly samplable conditional plus a closed-form complete-data
//! maximizer (mixture or linear-Gaussian), and `vi`/`vae` need a
//! continuous latent for pathwise gradients, which the mixture's discrete
//! latent cannot provide.

use std::time::Instant;

use super::checkpoint::Checkpoint;
use super::config::Ini;
use super::dataset::{read_data_csv, read_sidecar, sidecar_path, DataSpec, Truth};
use super::metrics::{TrainReport, TrainRow};
use super::HarnessError;
use crate::amortized::{
    amortization_gap_report, batch_elbo_a, grad_joint, Encoder, DEFAULT_GAP_BUDGET,
};
use crate::ddm::{
    grad_simple_loss, sample_reverse, schedule_make, simple_loss, NoisePredictor, ScheduleKind,
    VarianceSchedule,
};
use crate::diffnet::{Activation, MlpSpec};
use crate::em::{em_step_gmm, gmm_init_kmeans_pp, mcem_step};
use crate::meanfield::{elbo_estimate, fit_local, Adam, MeanFieldParams};
use crate::models::{
    lg_log_marginal, GmmFamily, LatentModel, LgFamily, LinearGaussianModel, NlFamily,
};
use crate::numkit::{RngStream, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Em,
    Mcem,
    Vi,
    Vae,
    Ddm,
}

impl Method {
    pub fn parse(s: &str) -> Result<Method, HarnessError> {
        match s {
            "em" => Ok(Method::Em),
            "mcem" => Ok(Method::Mcem),
            "vi" => Ok(Method::Vi),
            "vae" => Ok(Method::Vae),
            "ddm" => Ok(Method::Ddm),
            other => Err(HarnessError::Config(format!(
                "unknown method `{other}`; expected em, mcem, vi, vae, or ddm"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum HeadKind {
    Diag,
    Chol,
}

/// What a checkpoint's parameter vector means. Serializes to the
/// single-line topology descriptor stored in the checkpoint header and
/// parses back without any other context.
#[derive(Clone, Debug, PartialEq)]
pub enum Topology {
    /// Isotropic mixture fitted by em/mcem; params = flat mixture vector.
    Gmm { k: usize, d: usize },
    /// Linear-Gaussian generative parameters alone (mcem).
    Lg { d: usize, k: usize },
    /// Fixed decoder plus per-datum mean-field locals (vi);
    /// params = [decoder | n × (α, log β)].
    Vi { d: usize, k: usize, n: usize },
    /// Decoder plus amortized encoder (vae); params = [decoder | encoder].
    Vae {
        d: usize,
        k: usize,
        /// Hidden widths of the nonlinear decoder nets; `None` means the
        /// linear-Gaussian decoder.
        dec_hidden: Option<Vec<usize>>,
        enc_hidden: Vec<usize>,
        head: HeadKind,
        head_hidden: Vec<usize>,
    },
    /// Noise-prediction network plus its fixed variance schedule.
    Ddm {
        d: usize,
        hidden: Vec<usize>,
        schedule: ScheduleKind,
        t_steps: usize,
    },
}

fn fmt_hidden(h: &[usize]) -> String {
    if h.is_empty() {
        "none".into()
    } else {
        h.iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }
}

fn parse_hidden(s: &str) -> Result<Vec<usize>, HarnessError> {
    if s == "none" {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| p.parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| HarnessError::Config(format!("bad hidden-layer list `{s}`")))
}

fn fmt_schedule(kind: &ScheduleKind, t_steps: usize) -> String {
    match kind {
        ScheduleKind::Linear { phi_start, phi_end } => {
            format!("linear:{phi_start}:{phi_end}:{t_steps}")
        }
        ScheduleKind::Constant { phi } => format!("constant:{phi}:{t_steps}"),
    }
}

fn parse_schedule_token(s: &str) -> Result<(ScheduleKind, usize), HarnessError> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || HarnessError::Config(format!("bad schedule token `{s}`"));
    let f = |p: &str| p.parse::<f64>().map_err(|_| bad());
    let n = |p: &str| p.parse::<usize>().map_err(|_| bad());
    match parts.as_slice() {
        ["linear", a, b, t] => Ok((
            ScheduleKind::Linear {
                phi_start: f(a)?,
                phi_end: f(b)?,
            },
            n(t)?,
        )),
        ["constant", p, t] => Ok((ScheduleKind::Constant { phi: f(p)? }, n(t)?)),
        _ => Err(bad()),
    }
}

impl Topology {
    pub fn descriptor(&self) -> String {
        match self {
            Topology::Gmm { k, d } => format!("gmm k={k} d={d}"),
            Topology::Lg { d, k } => format!("linear_gaussian d={d} k={k}"),
            Topology::Vi { d, k, n } => format!("vi linear_gaussian d={d} k={k} n={n}"),
            Topology::Vae {
                d,
                k,
                dec_hidden,
                enc_hidden,
                head,
                head_hidden,
            } => {
                let dec = match dec_hidden {
                    None => "linear_gaussian".to_string(),
                    Some(h) => format!("nonlinear:{}", fmt_hidden(h)),
                };
                let head_tag = match head {
                    HeadKind::Diag => "diag",
                    HeadKind::Chol => "chol",
                };
                format!(
                    "vae {dec} d={d} k={k} enc={} head={head_tag}:{}",
                    fmt_hidden(enc_hidden),
                    fmt_hidden(head_hidden)
                )
            }
            Topology::Ddm {
                d,
                hidden,
                schedule,
                t_steps,
            } => format!(
                "ddm d={d} hidden={} schedule={}",
                fmt_hidden(hidden),
                fmt_schedule(schedule, *t_steps)
            ),
        }
    }

    pub fn parse(desc: &str) -> Result<Topology, HarnessError> {
        let bad = |msg: &str| HarnessError::Config(format!("bad topology `{desc}`: {msg}"));
        let tokens: Vec<&str> = desc.split_whitespace().collect();
        let field = |key: &str| -> Result<&str, HarnessError> {
            tokens
                .iter()
                .find_map(|t| t.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                .ok_or_else(|| bad(&format!("missing {key}=")))
        };
        let num = |key: &str| -> Result<usize, HarnessError> {
            field(key)?
                .parse::<usize>()
                .map_err(|_| bad(&format!("{key} is not an integer")))
        };
        match tokens.first().copied() {
            Some("gmm") => Ok(Topology::Gmm {
                k: num("k")?,
                d: num("d")?,
            }),
            Some("linear_gaussian") => Ok(Topology::Lg {
                d: num("d")?,
                k: num("k")?,
            }),
            Some("vi") => Ok(Topology::Vi {
                d: num("d")?,
                k: num("k")?,
                n: num("n")?,
            }),
            Some("vae") => {
                let dec = tokens.get(1).copied().ok_or_else(|| bad("missing decoder"))?;
                let dec_hidden = if dec == "linear_gaussian" {
                    None
                } else if let Some(h) = dec.strip_prefix("nonlinear:") {
                    Some(parse_hidden(h)?)
                } else {
                    return Err(bad("decoder must be linear_gaussian or nonlinear:<hidden>"));
                };
                let head_token = field("head")?;
                let (head, head_hidden) = match head_token.split_once(':') {
                    Some(("diag", h)) => (HeadKind::Diag, parse_hidden(h)?),
                    Some(("chol", h)) => (HeadKind::Chol, parse_hidden(h)?),
                    _ => return Err(bad("head must be diag:<hidden> or chol:<hidden>")),
                };
                Ok(Topology::Vae {
                    d: num("d")?,
                    k: num("k")?,
                    dec_hidden,
                    enc_hidden: parse_hidden(field("enc")?)?,
                    head,
                    head_hidden,
                })
            }
            Some("ddm") => {
                let (schedule, t_steps) = parse_schedule_token(field("schedule")?)?;
                Ok(Topology::Ddm {
                    d: num("d")?,
                    hidden: parse_hidden(field("hidden")?)?,
                    schedule,
                    t_steps,
                })
            }
            _ => Err(bad("unknown leading tag")),
        }
    }

    pub fn data_dim(&self) -> usize {
        match self {
            Topology::Gmm { d, .. }
            | Topology::Lg { d, .. }
            | Topology::Vi { d, .. }
            | Topology::Vae { d, .. }
            | Topology::Ddm { d, .. } => *d,
        }
    }
}

/// Builds the amortized encoder for a vae topology.
fn build_encoder(topo: &Topology) -> Result<Encoder, HarnessError> {
    let Topology::Vae {
        d,
        k,
        enc_hidden,
        head,
        head_hidden,
        ..
    } = topo
    else {
        return Err(HarnessError::Config("not a vae topology".into()));
    };
    let layer = |hidden: &[usize], out: usize| -> Result<MlpSpec, HarnessError> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(*d);
        sizes.extend_from_slice(hidden);
        sizes.push(out);
        MlpSpec::new(&sizes, Activation::Tanh)
            .map_err(|e| HarnessError::Config(format!("bad encoder architecture: {e}")))
    };
    let mean_spec = layer(enc_hidden, *k)?;
    let enc = match head {
        HeadKind::Diag => Encoder::diagonal(mean_spec, layer(head_hidden, *k)?),
        HeadKind::Chol => Encoder::cholesky(mean_spec, layer(head_hidden, k * (k + 1) / 2)?),
    };
    enc.map_err(|e| HarnessError::Config(format!("bad encoder architecture: {e}")))
}

/// Builds the nonlinear decoder family for a vae topology with
/// `dec_hidden = Some(..)`.
fn build_nl_family(d: usize, k: usize, hidden: &[usize]) -> Result<NlFamily, HarnessError> {
    let layer = |out: usize| -> Result<MlpSpec, HarnessError> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(k);
        sizes.extend_from_slice(hidden);
        sizes.push(out);
        MlpSpec::new(&sizes, Activation::Tanh)
            .map_err(|e| HarnessError::Config(format!("bad decoder architecture: {e}")))
    };
    NlFamily::new(layer(d)?, layer(1)?)
        .map_err(|e| HarnessError::Config(format!("bad decoder architecture: {e}")))
}

fn build_predictor(topo: &Topology) -> Result<(NoisePredictor, VarianceSchedule), HarnessError> {
    let Topology::Ddm {
        d,
        hidden,
        schedule,
        t_steps,
    } = topo
    else {
        return Err(HarnessError::Config("not a ddm topology".into()));
    };
    let psi = NoisePredictor::with_hidden(*d, hidden, Activation::Tanh)
        .map_err(|e| HarnessError::Config(format!("bad predictor architecture: {e}")))?;
    let sched = schedule_make(*schedule, *t_steps)
        .map_err(|e| HarnessError::Config(format!("bad schedule: {e}")))?;
    Ok((psi, sched))
}

/// Result of a training run. `aborted` carries a divergence message when
/// optimization hit non-finite values; the metrics logged so far and the
/// last finite parameters are still returned so the orchestrator can
/// persist them before failing with a numerical error.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub checkpoint: Checkpoint,
    pub aborted: Option<String>,
}

pub fn resolve_seed(config_seed: Option<u64>, cli_seed: Option<u64>) -> Result<u64, HarnessError> {
    cli_seed.or(config_seed).ok_or_else(|| {
        HarnessError::Config("no seed: set `seed` under [run] or pass --seed".into())
    })
}

fn num_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Numerical(e.to_string())
}

fn load_dataset(path_str: &str) -> Result<(Vec<Vector>, Option<(DataSpec, Truth)>), HarnessError> {
    let path = std::path::Path::new(path_str);
    let data = read_data_csv(path)?;
    if data.is_empty() {
        return Err(HarnessError::Config(format!(
            "dataset {path_str} has no rows"
        )));
    }
    let sidecar = sidecar_path(path);
    let truth = if sidecar.exists() {
        let (spec, _seed, truth) = read_sidecar(&sidecar)?;
        Some((spec, truth))
    } else {
        None
    };
    Ok((data, truth))
}

fn lg_truth<'a>(
    truth: &'a Option<(DataSpec, Truth)>,
    method: &str,
) -> Result<&'a LinearGaussianModel, HarnessError> {
    match truth {
        Some((_, Truth::LinearGaussian(m))) => Ok(m),
        _ => Err(HarnessError::Config(format!(
            "{method} needs a linear_gaussian dataset with its sidecar (the generative \
             parameters seed the decoder)"
        ))),
    }
}

fn total_lg_loglik(model: &LinearGaussianModel, data: &[Vector]) -> Result<f64, HarnessError> {
    let mut acc = 0.0;
    for x in data {
        acc += lg_log_marginal(model, x).map_err(num_err)?;
    }
    Ok(acc)
}

fn all_finite(v: &Vector) -> bool {
    v.iter().all(|x| x.is_finite())
}

struct OptSection {
    iters: usize,
    tol: f64,
    log_every: usize,
    gamma: f64,
    gamma_theta: f64,
    gamma_phi: f64,
    gamma_omega: f64,
    batch_size: usize,
    m: usize,
    eval_samples: usize,
    adaptive: bool,
    inner_first: usize,
    inner_rest: usize,
}

/// Reads [optimizer] with one shared key set; `allowed` lists the keys the
/// chosen method actually honors so that stray settings fail loudly
/// instead of being silently ignored.
fn read_optimizer(ini: &Ini, allowed: &[&str], defaults: OptSection) -> Result<OptSection, HarnessError> {
    let mut r = ini.reader("optimizer");
    let mut out = defaults;
    let has = |key: &str| allowed.contains(&key);
    if has("iters") {
        out.iters = r.usize_or("iters", out.iters)?;
    }
    if has("tol") {
        out.tol = r.f64_or("tol", out.tol)?;
    }
    if has("log_every") {
        out.log_every = r.usize_or("log_every", out.log_every)?;
        if out.log_every == 0 {
            return Err(HarnessError::Config("log_every must be positive".into()));
        }
    }
    if has("gamma") {
        out.gamma = r.f64_or("gamma", out.gamma)?;
    }
    if has("gamma_theta") {
        out.gamma_theta = r.f64_or("gamma_theta", out.gamma_theta)?;
    }
    if has("gamma_phi") {
        out.gamma_phi = r.f64_or("gamma_phi", out.gamma_phi)?;
    }
    if has("gamma_omega") {
        out.gamma_omega = r.f64_or("gamma_omega", out.gamma_omega)?;
    }
    if has("batch_size") {
        out.batch_size = r.usize_or("batch_size", out.batch_size)?;
        if out.batch_size == 0 {
            return Err(HarnessError::Config("batch_size must be positive".into()));
        }
    }
    if has("m") {
        out.m = r.usize_or("m", out.m)?;
        if out.m == 0 {
            return Err(HarnessError::Config("m must be positive".into()));
        }
    }
    if has("eval_samples") {
        out.eval_samples = r.usize_or("eval_samples", out.eval_samples)?;
    }
    if has("adaptive") {
        out.adaptive = r.bool_or("adaptive", out.adaptive)?;
    }
    if has("inner_first") {
        out.inner_first = r.usize_or("inner_first", out.inner_first)?;
    }
    if has("inner_rest") {
        out.inner_rest = r.usize_or("inner_rest", out.inner_rest)?;
    }
    r.finish()?;
    Ok(out)
}

fn base_optimizer() -> OptSection {
    OptSection {
        iters: 100,
        tol: 1e-8,
        log_every: 1,
        gamma: 1e-2,
        gamma_theta: 0.0,
        gamma_phi: 1e-2,
        gamma_omega: 1e-2,
        batch_size: 64,
        m: 8,
        eval_samples: 64,
        adaptive: false,
        inner_first: 200,
        inner_rest: 25,
    }
}

/// Dispatches a `train` run from a parsed config.
pub fn run_train(ini: &Ini, cli_seed: Option<u64>) -> Result<TrainOutcome, HarnessError> {
    ini.check_sections(&["run", "model", "optimizer", "schedule"])?;
    let mut run = ini.reader("run");
    let method = Method::parse(run.str_req("method")?)?;
    let data_path = run.str_req("data")?.to_string();
    let seed = resolve_seed(run.opt_u64("seed")?, cli_seed)?;
    run.finish()?;
    if method != Method::Ddm && ini.has_section("schedule") {
        return Err(HarnessError::Config(
            "[schedule] only applies to method = ddm".into(),
        ));
    }
    let (data, truth) = load_dataset(&data_path)?;
    match method {
        Method::Em | Method::Mcem => train_em_family(method, ini, &data, &truth, seed),
        Method::Vi => train_vi(ini, &data, &truth, seed),
        Method::Vae => train_vae(ini, &data, &truth, seed),
        Method::Ddm => train_ddm(ini, &data, seed),
    }
}

struct RowLogger {
    rows: Vec<TrainRow>,
    log_every: usize,
    started: Instant,
}

impl RowLogger {
    fn new(log_every: usize) -> Self {
        RowLogger {
            rows: Vec::new(),
            log_every,
            started: Instant::now(),
        }
    }

    fn log(&mut self, iter: usize, last: bool, objective: f64, oracle: Option<f64>) {
        if iter == 0 || last || iter % self.log_every == 0 {
            self.rows.push(TrainRow {
                iter,
                objective,
                oracle_loglik: oracle,
                wall_ms: self.started.elapsed().as_millis() as u64,
            });
        }
    }
}

fn train_em_family(
    method: Method,
    ini: &Ini,
    data: &[Vector],
    truth: &Option<(DataSpec, Truth)>,
    seed: u64,
) -> Result<TrainOutcome, HarnessError> {
    let method_name = if method == Method::Em { "em" } else { "mcem" };
    let mut ms = ini.reader("model");
    let kind = ms.str_req("kind")?.to_string();
    let opt = read_optimizer(
        ini,
        if method == Method::Em {
            &["iters", "tol", "log_every"]
        } else {
            &["iters", "tol", "log_every", "m"]
        },
        OptSection {
            m: 100,
            ..base_optimizer()
        },
    )?;
    let mut rng = RngStream::new(seed, super::STREAM_TRAIN);
    match kind.as_str() {
        "gmm" => {
            let k = ms.usize_req("k")?;
            ms.finish()?;
            let d = data[0].len();
            let family = GmmFamily::new(k, d);
            let mut model = gmm_init_kmeans_pp(data, k, &mut rng).map_err(num_err)?;
            let mut logger = RowLogger::new(opt.log_every);
            let mut ll = model.total_log_likelihood(data);
            logger.log(0, false, ll, Some(ll));
            let mut converged = false;
            for t in 1..=opt.iters {
                model = match method {
                    Method::Em => em_step_gmm(&model, data, &mut rng).map_err(num_err)?.0,
                    _ => mcem_step(&model, data, opt.m, &mut rng).map_err(num_err)?,
                };
                let next = model.total_log_likelihood(data);
                logger.log(t, t == opt.iters, next, Some(next));
                converged = (next - ll).abs() < opt.tol * (1.0 + next.abs());
                ll = next;
            }
            Ok(TrainOutcome {
                report: TrainReport {
                    rows: logger.rows,
                    seed,
                    converged,
                },
                checkpoint: Checkpoint {
                    descriptor: Topology::Gmm { k, d }.descriptor(),
                    params: family.pack(&model),
                },
                aborted: None,
            })
        }
        "linear_gaussian" if method == Method::Mcem => {
            ms.finish()?;
            let truth_model = lg_truth(truth, "mcem on linear_gaussian")?;
            let d = truth_model.data_dim();
            let k = truth_model.latent_dim();
            let family = LgFamily::new(d, k);
            // Stochastic fixed-point demonstration: start at the sidecar
            // truth and watch the imputed-ML iteration hover near the MLE.
            let mut model = truth_model.clone();
            let mut logger = RowLogger::new(opt.log_every);
            let mut ll = total_lg_loglik(&model, data)?;
            logger.log(0, false, ll, Some(ll));
            let mut converged = false;
            for t in 1..=opt.iters {
                model = mcem_step(&model, data, opt.m, &mut rng).map_err(num_err)?;
                let next = total_lg_loglik(&model, data)?;
                logger.log(t, t == opt.iters, next, Some(next));
                converged = (next - ll).abs() < opt.tol * (1.0 + next.abs());
                ll = next;
            }
            Ok(TrainOutcome {
                report: TrainReport {
                    rows: logger.rows,
                    seed,
                    converged,
                },
                checkpoint: Checkpoint {
                    descriptor: Topology::Lg { d, k }.descriptor(),
                    params: family.pack(&model),
                },
                aborted: None,
            })
        }
        "linear_gaussian" | "nonlinear" => Err(HarnessError::Config(format!(
            "method {method_name} cannot fit the {kind} model: it needs an exactly solvable \
             E-step{}; use vi or vae instead",
            if method == Method::Mcem {
                " and a closed-form complete-data maximizer"
            } else {
                ""
            }
        ))),
        other => Err(HarnessError::Config(format!(
            "unknown model kind `{other}`"
        ))),
    }
}

fn check_kind_for_variational<'a>(
    ms: &mut super::config::SectionReader<'a>,
    method: &str,
) -> Result<&'a str, HarnessError> {
    match ms.str_req("kind")? {
        kind @ ("linear_gaussian" | "nonlinear") => Ok(kind),
        "gmm" => Err(HarnessError::Config(format!(
            "method {method} needs a continuous latent for pathwise gradients; the mixture's \
             discrete latent has none — use em or mcem"
        ))),
        other => Err(HarnessError::Config(format!("unknown model kind `{other}`"))),
    }
}

fn train_vi(
    ini: &Ini,
    data: &[Vector],
    truth: &Option<(DataSpec, Truth)>,
    seed: u64,
) -> Result<TrainOutcome, HarnessError> {
    let mut ms = ini.reader("model");
    if check_kind_for_variational(&mut ms, "vi")? == "nonlinear" {
        return Err(HarnessError::Config(
            "vi refits one mean-field posterior per datum against a fixed decoder, \
             which needs the decoder given in closed form; only linear_gaussian \
             datasets carry one — use vae for the nonlinear decoder"
                .into(),
        ));
    }
    ms.finish().map_err(|e| match e {
        // vi takes everything from the sidecar, so any extra model key is a
        // mistake; keep the config error but point at the sidecar contract.
        HarnessError::Config(msg) => HarnessError::Config(format!(
            "{msg} (vi reads d, k, and the decoder from the dataset sidecar)"
        )),
        other => other,
    })?;
    let truth_model = lg_truth(truth, "vi")?;
    let opt = read_optimizer(
        ini,
        &[
            "iters",
            "tol",
            "log_every",
            "gamma_omega",
            "m",
            "eval_samples",
            "inner_first",
            "inner_rest",
        ],
        OptSection {
            iters: 10,
            ..base_optimizer()
        },
    )?;
    let d = truth_model.data_dim();
    let k = truth_model.latent_dim();
    let n = data.len();
    let family = LgFamily::new(d, k);
    let theta = family.pack(truth_model);
    let oracle = total_lg_loglik(truth_model, data)?;
    let rng = RngStream::new(seed, super::STREAM_TRAIN);
    let mut locals = vec![MeanFieldParams::standard(k); n];
    let mut logger = RowLogger::new(opt.log_every);
    let eval_total = |locals: &[MeanFieldParams], stream: &RngStream| -> f64 {
        let mut acc = 0.0;
        for (i, x) in data.iter().enumerate() {
            let mut r = stream.substream((n + i) as u64);
            acc += elbo_estimate(&family, &theta, &locals[i], x, opt.eval_samples, &mut r);
        }
        acc
    };
    logger.log(0, false, eval_total(&locals, &rng.substream(0)), Some(oracle));
    let mut prev = f64::NAN;
    let mut converged = false;
    for t in 1..=opt.iters {
        let iter_stream = rng.substream(t as u64);
        let steps = if t == 1 { opt.inner_first } else { opt.inner_rest };
        for (i, x) in data.iter().enumerate() {
            let mut local_rng = iter_stream.substream(i as u64);
            let refined = fit_local(
                &family,
                &theta,
                x,
                &locals[i],
                steps,
                opt.gamma_omega,
                opt.m,
                &mut local_rng,
            )
            .map_err(num_err)?;
            locals[i] = refined;
        }
        let total = eval_total(&locals, &iter_stream);
        logger.log(t, t == opt.iters, total, Some(oracle));
        converged = (total - prev).abs() < opt.tol * (1.0 + total.abs());
        prev = total;
    }
    let mut params = Vector::zeros(family.param_len() + n * 2 * k);
    params.rows_mut(0, family.param_len()).copy_from(&theta);
    for (i, local) in locals.iter().enumerate() {
        params
            .rows_mut(family.param_len() + i * 2 * k, 2 * k)
            .copy_from(&local.pack());
    }
    Ok(TrainOutcome {
        report: TrainReport {
            rows: logger.rows,
            seed,
            converged,
        },
        checkpoint: Checkpoint {
            descriptor: Topology::Vi { d, k, n }.descriptor(),
            params,
        },
        aborted: None,
    })
}

fn train_vae(
    ini: &Ini,
    data: &[Vector],
    truth: &Option<(DataSpec, Truth)>,
    seed: u64,
) -> Result<TrainOutcome, HarnessError> {
    let mut ms = ini.reader("model");
    let kind = check_kind_for_variational(&mut ms, "vae")?.to_string();
    let d = data[0].len();
    let (k, dec_hidden) = if kind == "nonlinear" {
        let k = ms.usize_req("k")?;
        let hidden = ms
            .opt_usize_list("dec_hidden")?
            .unwrap_or_else(|| vec![16]);
        (k, Some(hidden))
    } else {
        let truth_model = lg_truth(truth, "vae on linear_gaussian")?;
        if truth_model.data_dim() != d {
            return Err(HarnessError::Config(
                "sidecar dimensions do not match the dataset".into(),
            ));
        }
        (truth_model.latent_dim(), None)
    };
    let enc_hidden = ms.opt_usize_list("enc_hidden")?.unwrap_or_else(|| vec![8]);
    let head = match ms.opt_str("head").unwrap_or("diag") {
        "diag" => HeadKind::Diag,
        "chol" => HeadKind::Chol,
        other => {
            return Err(HarnessError::Config(format!(
                "head must be diag or chol, got `{other}`"
            )))
        }
    };
    let head_hidden = ms
        .opt_usize_list("head_hidden")?
        .unwrap_or_else(|| enc_hidden.clone());
    ms.finish()?;
    let topo = Topology::Vae {
        d,
        k,
        dec_hidden: dec_hidden.clone(),
        enc_hidden,
        head,
        head_hidden,
    };
    let opt = read_optimizer(
        ini,
        &[
            "iters",
            "log_every",
            "gamma_theta",
            "gamma_phi",
            "batch_size",
            "m",
            "eval_samples",
            "adaptive",
        ],
        OptSection {
            iters: 50,
            ..base_optimizer()
        },
    )?;

    let enc = build_encoder(&topo)?;
    let rng = RngStream::new(seed, super::STREAM_TRAIN);
    let mut init_rng = rng.substream(0);
    let (family, mut theta): (Box<dyn LatentModel>, Vector) = match &dec_hidden {
        None => {
            let truth_model = lg_truth(truth, "vae on linear_gaussian")?;
            let family = LgFamily::new(d, k);
            let theta = family.pack(truth_model);
            (Box::new(family), theta)
        }
        Some(hidden) => {
            let family = build_nl_family(d, k, hidden)?;
            let theta = family.init(&mut init_rng);
            (Box::new(family), theta)
        }
    };
    let lg_family = dec_hidden.is_none().then(|| LgFamily::new(d, k));
    let mut phi = enc.init(&mut init_rng);

    let n = data.len();
    let mut adam_theta = Adam::new(theta.len());
    let mut adam_phi = Adam::new(phi.len());
    let eval_base = rng.substream(u64::MAX);
    let mut logger = RowLogger::new(opt.log_every);
    let oracle_for = |theta: &Vector| -> Result<Option<f64>, HarnessError> {
        match &lg_family {
            Some(f) => {
                let model = f.unpack(theta).map_err(num_err)?;
                Ok(Some(total_lg_loglik(&model, data)?))
            }
            None => Ok(None),
        }
    };
    let eval_obj = |theta: &Vector, phi: &Vector| -> Result<f64, HarnessError> {
        Ok(n as f64
            * batch_elbo_a(
                family.as_ref(),
                theta,
                &enc,
                phi,
                data,
                opt.eval_samples,
                &mut eval_base.clone(),
            )
            .map_err(num_err)?)
    };
    logger.log(0, false, eval_obj(&theta, &phi)?, oracle_for(&theta)?);

    let mut aborted = None;
    'epochs: for epoch in 1..=opt.iters {
        let epoch_stream = rng.substream(epoch as u64);
        let mut shuffle_rng = epoch_stream.substream(0);
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = shuffle_rng.below(i + 1);
            order.swap(i, j);
        }
        for (b, chunk) in order.chunks(opt.batch_size).enumerate() {
            let batch: Vec<Vector> = chunk.iter().map(|&i| data[i].clone()).collect();
            let mut batch_rng = epoch_stream.substream(1 + b as u64);
            let (g_theta, g_phi) = grad_joint(
                family.as_ref(),
                &theta,
                &enc,
                &phi,
                &batch,
                opt.m,
                &mut batch_rng,
            )
            .map_err(num_err)?;
            let (d_theta, d_phi) = if opt.adaptive {
                (adam_theta.direction(&g_theta), adam_phi.direction(&g_phi))
            } else {
                (g_theta, g_phi)
            };
            let theta_next = &theta + d_theta * opt.gamma_theta;
            let phi_next = &phi + d_phi * opt.gamma_phi;
            if !all_finite(&theta_next) || !all_finite(&phi_next) {
                aborted = Some(format!(
                    "training diverged at epoch {epoch}, batch {b}: non-finite update"
                ));
                break 'epochs;
            }
            theta = theta_next;
            phi = phi_next;
        }
        let obj = eval_obj(&theta, &phi)?;
        if !obj.is_finite() {
            aborted = Some(format!("training diverged at epoch {epoch}: non-finite bound"));
            break;
        }
        logger.log(epoch, epoch == opt.iters, obj, oracle_for(&theta)?);
    }

    let converged = aborted.is_none();
    let mut params = Vector::zeros(theta.len() + phi.len());
    params.rows_mut(0, theta.len()).copy_from(&theta);
    params.rows_mut(theta.len(), phi.len()).copy_from(&phi);
    Ok(TrainOutcome {
        report: TrainReport {
            rows: logger.rows,
            seed,
            converged,
        },
        checkpoint: Checkpoint {
            descriptor: topo.descriptor(),
            params,
        },
        aborted,
    })
}

fn train_ddm(ini: &Ini, data: &[Vector], seed: u64) -> Result<TrainOutcome, HarnessError> {
    let mut ms = ini.reader("model");
    if let Some(kind) = ms.opt_str("kind") {
        if kind != "ddm" {
            return Err(HarnessError::Config(format!(
                "method ddm trains a noise-prediction network, not the {kind} model; \
                 drop `kind` or set kind = ddm"
            )));
        }
    }
    let hidden = ms.opt_usize_list("hidden")?.unwrap_or_else(|| vec![64, 64]);
    ms.finish()?;
    let mut sched = ini.reader("schedule");
    let kind = sched.opt_str("kind").unwrap_or("linear");
    let t_steps = sched.usize_or("t_steps", 50)?;
    let schedule = match kind {
        "linear" => ScheduleKind::Linear {
            phi_start: sched.f64_or("phi_start", 0.999)?,
            phi_end: sched.f64_or("phi_end", 0.95)?,
        },
        "constant" => ScheduleKind::Constant {
            phi: sched.f64_or("phi", 0.99)?,
        },
        other => {
            return Err(HarnessError::Config(format!(
                "schedule kind must be linear or constant, got `{other}`"
            )))
        }
    };
    sched.finish()?;
    let d = data[0].len();
    let topo = Topology::Ddm {
        d,
        hidden,
        schedule,
        t_steps,
    };
    let opt = read_optimizer(
        ini,
        &[
            "iters",
            "log_every",
            "gamma",
            "batch_size",
            "m",
            "adaptive",
        ],
        OptSection {
            iters: 200,
            m: 1,
            adaptive: true,
            ..base_optimizer()
        },
    )?;
    let (psi, sched) = build_predictor(&topo)?;

    let rng = RngStream::new(seed, super::STREAM_TRAIN);
    let mut theta = psi.init(&mut rng.substream(0));
    let mut adam = Adam::new(theta.len());
    let eval_base = rng.substream(u64::MAX);
    let n = data.len();
    let mut logger = RowLogger::new(opt.log_every);
    let eval_loss = |theta: &Vector| -> Result<f64, HarnessError> {
        simple_loss(&psi, theta, data, opt.m, &sched, &mut eval_base.clone(), false)
            .map_err(num_err)
    };
    let first = eval_loss(&theta)?;
    logger.log(0, false, first, None);
    let mut last = first;
    let mut aborted = None;
    'epochs: for epoch in 1..=opt.iters {
        let epoch_stream = rng.substream(epoch as u64);
        let mut shuffle_rng = epoch_stream.substream(0);
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = shuffle_rng.below(i + 1);
            order.swap(i, j);
        }
        for (b, chunk) in order.chunks(opt.batch_size).enumerate() {
            let batch: Vec<Vector> = chunk.iter().map(|&i| data[i].clone()).collect();
            let mut batch_rng = epoch_stream.substream(1 + b as u64);
            let (_, g) = grad_simple_loss(
                &psi,
                &theta,
                &batch,
                opt.m,
                &sched,
                &mut batch_rng,
                false,
            )
            .map_err(num_err)?;
            let step = if opt.adaptive { adam.direction(&g) } else { g };
            let theta_next = &theta - step * opt.gamma;
            if !all_finite(&theta_next) {
                aborted = Some(format!(
                    "training diverged at epoch {epoch}, batch {b}: non-finite update"
                ));
                break 'epochs;
            }
            theta = theta_next;
        }
        let loss = eval_loss(&theta)?;
        if !loss.is_finite() {
            aborted = Some(format!("training diverged at epoch {epoch}: non-finite loss"));
            break;
        }
        logger.log(epoch, epoch == opt.iters, loss, None);
        last = loss;
    }
    let converged = aborted.is_none() && last <= first;
    Ok(TrainOutcome {
        report: TrainReport {
            rows: logger.rows,
            seed,
            converged,
        },
        checkpoint: Checkpoint {
            descriptor: topo.descriptor(),
            params: theta,
        },
        aborted,
    })
}

/// One held-out point's gap diagnostics.
#[derive(Clone, Debug)]
pub struct GapRow {
    pub index: usize,
    pub gap: f64,
    pub se: f64,
    pub elbo_local: f64,
    pub elbo_amortized: f64,
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub objective: f64,
    pub oracle_loglik: Option<f64>,
    pub gap_rows: Option<Vec<GapRow>>,
}

/// Splits a vae checkpoint into (family, decoder θ, encoder, encoder φ).
fn split_vae(
    topo: &Topology,
    params: &Vector,
) -> Result<(Box<dyn LatentModel>, Vector, Encoder, Vector), HarnessError> {
    let Topology::Vae { d, k, dec_hidden, .. } = topo else {
        return Err(HarnessError::Config("not a vae topology".into()));
    };
    let family: Box<dyn LatentModel> = match dec_hidden {
        None => Box::new(LgFamily::new(*d, *k)),
        Some(h) => Box::new(build_nl_family(*d, *k, h)?),
    };
    let enc = build_encoder(topo)?;
    let want = family.param_len() + enc.param_len();
    if params.len() != want {
        return Err(HarnessError::Config(format!(
            "checkpoint has {} parameters, topology needs {want}",
            params.len()
        )));
    }
    let theta = params.rows(0, family.param_len()).into_owned();
    let phi = params.rows(family.param_len(), enc.param_len()).into_owned();
    Ok((family, theta, enc, phi))
}

fn split_vi(
    topo: &Topology,
    params: &Vector,
) -> Result<(LgFamily, Vector, Vec<MeanFieldParams>), HarnessError> {
    let Topology::Vi { d, k, n } = topo else {
        return Err(HarnessError::Config("not a vi topology".into()));
    };
    let family = LgFamily::new(*d, *k);
    let want = family.param_len() + n * 2 * k;
    if params.len() != want {
        return Err(HarnessError::Config(format!(
            "checkpoint has {} parameters, topology needs {want}",
            params.len()
        )));
    }
    let theta = params.rows(0, family.param_len()).into_owned();
    let locals = (0..*n)
        .map(|i| {
            MeanFieldParams::unpack(
                &params
                    .rows(family.param_len() + i * 2 * k, 2 * k)
                    .into_owned(),
            )
        })
        .collect();
    Ok((family, theta, locals))
}

/// Dispatches an `eval` run: the final objective on a dataset, plus the
/// per-point amortization-gap report when `gap` is set (vae checkpoints
/// only).
pub fn run_eval(
    ini: &Ini,
    gap: bool,
    cli_seed: Option<u64>,
    ckpt: &Checkpoint,
) -> Result<EvalOutcome, HarnessError> {
    ini.check_sections(&["run", "eval"])?;
    let mut run = ini.reader("run");
    let data_path = run.str_req("data")?.to_string();
    let _ = run.opt_str("checkpoint");
    let seed = resolve_seed(run.opt_u64("seed")?, cli_seed)?;
    run.finish()?;
    let mut ev = ini.reader("eval");
    let m = ev.usize_or("m", 256)?;
    let points = ev.usize_or("points", 50)?;
    let budget = ev.usize_or("budget", DEFAULT_GAP_BUDGET)?;
    ev.finish()?;

    let (data, _) = load_dataset(&data_path)?;
    let topo = Topology::parse(&ckpt.descriptor)?;
    if topo.data_dim() != data[0].len() {
        return Err(HarnessError::Config(format!(
            "checkpoint is for d = {}, dataset has d = {}",
            topo.data_dim(),
            data[0].len()
        )));
    }
    let rng = RngStream::new(seed, super::STREAM_EVAL);
    let n = data.len();

    if gap {
        let Topology::Vae { .. } = topo else {
            return Err(HarnessError::Config(
                "gap evaluation needs a vae checkpoint".into(),
            ));
        };
        let (family, theta, enc, phi) = split_vae(&topo, &ckpt.params)?;
        let mut pick_rng = rng.substream(0);
        let mut indices: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = pick_rng.below(i + 1);
            indices.swap(i, j);
        }
        indices.truncate(points.min(n));
        indices.sort_unstable();
        let mut rows = Vec::with_capacity(indices.len());
        let mut mean_gap = 0.0;
        for &i in &indices {
            let mut point_rng = rng.substream(1 + i as u64);
            let report = amortization_gap_report(
                family.as_ref(),
                &theta,
                &enc,
                &phi,
                &data[i],
                budget,
                &mut point_rng,
            )
            .map_err(num_err)?;
            mean_gap += report.gap;
            rows.push(GapRow {
                index: i,
                gap: report.gap,
                se: report.se,
                elbo_local: report.elbo_local,
                elbo_amortized: report.elbo_amortized,
            });
        }
        mean_gap /= rows.len().max(1) as f64;
        return Ok(EvalOutcome {
            objective: mean_gap,
            oracle_loglik: None,
            gap_rows: Some(rows),
        });
    }

    let outcome = match &topo {
        Topology::Gmm { k, d } => {
            let family = GmmFamily::new(*k, *d);
            let model = family.unpack(&ckpt.params).map_err(num_err)?;
            let ll = model.total_log_likelihood(&data);
            EvalOutcome {
                objective: ll,
                oracle_loglik: Some(ll),
                gap_rows: None,
            }
        }
        Topology::Lg { d, k } => {
            let family = LgFamily::new(*d, *k);
            let model = family.unpack(&ckpt.params).map_err(num_err)?;
            let ll = total_lg_loglik(&model, &data)?;
            EvalOutcome {
                objective: ll,
                oracle_loglik: Some(ll),
                gap_rows: None,
            }
        }
        Topology::Vi { .. } => {
            let (family, theta, locals) = split_vi(&topo, &ckpt.params)?;
            if locals.len() != n {
                return Err(HarnessError::Config(format!(
                    "vi checkpoint stores {} locals but the dataset has {n} rows",
                    locals.len()
                )));
            }
            let mut obj = 0.0;
            for (i, x) in data.iter().enumerate() {
                let mut r = rng.substream(i as u64);
                obj += elbo_estimate(&family, &theta, &locals[i], x, m, &mut r);
            }
            let model = family.unpack(&theta).map_err(num_err)?;
            EvalOutcome {
                objective: obj,
                oracle_loglik: Some(total_lg_loglik(&model, &data)?),
                gap_rows: None,
            }
        }
        Topology::Vae { dec_hidden, .. } => {
            let (family, theta, enc, phi) = split_vae(&topo, &ckpt.params)?;
            let obj = n as f64
                * batch_elbo_a(family.as_ref(), &theta, &enc, &phi, &data, m, &mut rng.clone())
                    .map_err(num_err)?;
            let oracle = match dec_hidden {
                None => {
                    let model = LgFamily::new(topo.data_dim(), family.latent_len())
                        .unpack(&theta)
                        .map_err(num_err)?;
                    Some(total_lg_loglik(&model, &data)?)
                }
                Some(_) => None,
            };
            EvalOutcome {
                objective: obj,
                oracle_loglik: oracle,
                gap_rows: None,
            }
        }
        Topology::Ddm { .. } => {
            let (psi, sched) = build_predictor(&topo)?;
            if ckpt.params.len() != psi.param_len() {
                return Err(HarnessError::Config(format!(
                    "checkpoint has {} parameters, predictor needs {}",
                    ckpt.params.len(),
                    psi.param_len()
                )));
            }
            let loss = simple_loss(&psi, &ckpt.params, &data, m, &sched, &mut rng.clone(), false)
                .map_err(num_err)?;
            EvalOutcome {
                objective: loss,
                oracle_loglik: None,
                gap_rows: None,
            }
        }
    };
    Ok(outcome)
}

/// The generative signature a sample config must restate: everything that
/// determines what `sample` draws, nothing about inference-side parts.
fn generative_signature(topo: &Topology) -> String {
    match topo {
        Topology::Gmm { k, d } => format!("gmm k={k} d={d}"),
        Topology::Lg { d, k } | Topology::Vi { d, k, .. } => {
            format!("linear_gaussian d={d} k={k}")
        }
        Topology::Vae {
            d, k, dec_hidden, ..
        } => match dec_hidden {
            None => format!("linear_gaussian d={d} k={k}"),
            Some(h) => format!("nonlinear d={d} k={k} hidden={}", fmt_hidden(h)),
        },
        Topology::Ddm {
            d,
            hidden,
            schedule,
            t_steps,
        } => format!(
            "ddm d={d} hidden={} schedule={}",
            fmt_hidden(hidden),
            fmt_schedule(schedule, *t_steps)
        ),
    }
}

fn declared_signature(ini: &Ini) -> Result<String, HarnessError> {
    let mut ms = ini.reader("model");
    let kind = ms.str_req("kind")?.to_string();
    let sig = match kind.as_str() {
        "gmm" => {
            let k = ms.usize_req("k")?;
            let d = ms.usize_req("d")?;
            format!("gmm k={k} d={d}")
        }
        "linear_gaussian" => {
            let d = ms.usize_req("d")?;
            let k = ms.usize_req("k")?;
            format!("linear_gaussian d={d} k={k}")
        }
        "nonlinear" => {
            let d = ms.usize_req("d")?;
            let k = ms.usize_req("k")?;
            let hidden = ms.opt_usize_list("hidden")?.unwrap_or_default();
            format!("nonlinear d={d} k={k} hidden={}", fmt_hidden(&hidden))
        }
        "ddm" => {
            let d = ms.usize_req("d")?;
            let hidden = ms.opt_usize_list("hidden")?.unwrap_or_else(|| vec![64, 64]);
            let mut sched = ini.reader("schedule");
            let skind = sched.opt_str("kind").unwrap_or("linear");
            let t_steps = sched.usize_or("t_steps", 50)?;
            let schedule = match skind {
                "linear" => ScheduleKind::Linear {
                    phi_start: sched.f64_or("phi_start", 0.999)?,
                    phi_end: sched.f64_or("phi_end", 0.95)?,
                },
                "constant" => ScheduleKind::Constant {
                    phi: sched.f64_or("phi", 0.99)?,
                },
                other => {
                    return Err(HarnessError::Config(format!(
                        "schedule kind must be linear or constant, got `{other}`"
                    )))
                }
            };
            sched.finish()?;
            format!(
                "ddm d={d} hidden={} schedule={}",
                fmt_hidden(&hidden),
                fmt_schedule(&schedule, t_steps)
            )
        }
        other => {
            return Err(HarnessError::Config(format!(
                "unknown model kind `{other}`"
            )))
        }
    };
    ms.finish()?;
    Ok(sig)
}

/// Dispatches a `sample` run: `n` fresh draws from the generative side of
/// a checkpoint. The config restates the expected model topology, and a
/// mismatch with the checkpoint is an error rather than a silent trust.
pub fn run_sample(
    ini: &Ini,
    cli_seed: Option<u64>,
    ckpt: &Checkpoint,
) -> Result<(usize, Vec<Vector>), HarnessError> {
    ini.check_sections(&["run", "model", "schedule"])?;
    let mut run = ini.reader("run");
    let _ = run.opt_str("checkpoint");
    let n = run.usize_req("n")?;
    let seed = resolve_seed(run.opt_u64("seed")?, cli_seed)?;
    run.finish()?;

    let topo = Topology::parse(&ckpt.descriptor)?;
    let actual = generative_signature(&topo);
    let declared = declared_signature(ini)?;
    if declared != actual {
        return Err(HarnessError::Config(format!(
            "topology mismatch: config declares `{declared}` but the checkpoint holds `{actual}`"
        )));
    }
    if !matches!(topo, Topology::Ddm { .. }) && ini.has_section("schedule") {
        return Err(HarnessError::Config(
            "[schedule] only applies to ddm checkpoints".into(),
        ));
    }

    let d = topo.data_dim();
    let mut rng = RngStream::new(seed, super::STREAM_SAMPLE);
    let draw_generative =
        |family: &dyn LatentModel, theta: &Vector, rng: &mut RngStream| -> Vec<Vector> {
            (0..n)
                .map(|_| {
                    let z = family.sample_prior(theta, rng);
                    family.sample_decoder(theta, &z, rng)
                })
                .collect()
        };
    let samples = match &topo {
        Topology::Gmm { k, d } => {
            let family = GmmFamily::new(*k, *d);
            family.unpack(&ckpt.params).map_err(num_err)?;
            draw_generative(&family, &ckpt.params, &mut rng)
        }
        Topology::Lg { d, k } => {
            let family = LgFamily::new(*d, *k);
            family.unpack(&ckpt.params).map_err(num_err)?;
            draw_generative(&family, &ckpt.params, &mut rng)
        }
        Topology::Vi { .. } => {
            let (family, theta, _) = split_vi(&topo, &ckpt.params)?;
            draw_generative(&family, &theta, &mut rng)
        }
        Topology::Vae { .. } => {
            let (family, theta, _, _) = split_vae(&topo, &ckpt.params)?;
            draw_generative(family.as_ref(), &theta, &mut rng)
        }
        Topology::Ddm { .. } => {
            let (psi, sched) = build_predictor(&topo)?;
            if ckpt.params.len() != psi.param_len() {
                return Err(HarnessError::Config(format!(
                    "checkpoint has {} parameters, predictor needs {}",
                    ckpt.params.len(),
                    psi.param_len()
                )));
            }
            sample_reverse(&psi, &ckpt.params, &sched, n, &mut rng).map_err(num_err)?
        }
    };
    Ok((d, samples))
}

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::manifest::RunManifest;
use crate::write_atomic;
use matchdiff::config::RunConfig;
use matchdiff::data::{derive_seed, load_dataset, save_dataset, save_ply, synth_dataset, SceneKind, ScenePair, SynthSpec};
use matchdiff::dsm::Match;
use matchdiff::geometry::{rigid_warp, PointCloud, RigidTransform};
use matchdiff::metrics::{EvalReport, Thresholds};
use matchdiff::pipeline::{
    evaluate_prediction, predicted_flow, prepare_pair, reverse_sample, train, InitMode, Model, ModelConfig, PreparedPair,
    SampleConfig,
};
use matchdiff::schedule::{make_tau, StepFormula};
use matchdiff::tensor::checkpoint::{load_checkpoint, save_checkpoint};
use matchdiff::{Error, Result};

pub const TRANSFORMS_FILE: &str = "transforms.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Rigid,
    Deform,
}

#[derive(Clone, Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub pairs: usize,
    #[arg(long, value_enum, default_value = "rigid")]
    pub mode: Mode,
    /// Overlap target, or lower end of the range when --overlap-max is given.
    #[arg(long, default_value_t = 0.8)]
    pub overlap: f64,
    #[arg(long)]
    pub overlap_max: Option<f64>,
    #[arg(long, default_value_t = 0.005)]
    pub noise: f64,
    #[arg(long, default_value_t = 128)]
    pub points: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Run configuration JSON; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.0)]
    pub eta: f64,
    #[arg(long, value_enum, default_value = "gaussian")]
    pub init: InitArg,
    #[arg(long, value_enum, default_value = "standard")]
    pub formula: FormulaArg,
    #[arg(long, default_value_t = 128)]
    pub top_k: usize,
    /// Confident matches used for the reported transform.
    #[arg(long, default_value_t = 16)]
    pub procrustes_k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Metrics JSON path; a CSV mirror is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// `steps=1,2,3,10,20,50`, `init`, `eta[=values]` or `formula`.
    #[arg(long)]
    pub sweep: String,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    #[arg(long, default_value_t = 128)]
    pub top_k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    Gaussian,
    Backbone,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FormulaArg {
    Standard,
    Swapped,
}

impl From<InitArg> for InitMode {
    fn from(a: InitArg) -> Self {
        match a {
            InitArg::Gaussian => InitMode::Gaussian,
            InitArg::Backbone => InitMode::Backbone,
        }
    }
}

impl From<FormulaArg> for StepFormula {
    fn from(a: FormulaArg) -> Self {
        match a {
            FormulaArg::Standard => StepFormula::Standard,
            FormulaArg::Swapped => StepFormula::Swapped,
        }
    }
}

fn ensure_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && !force && fs::read_dir(dir)?.next().is_some() {
        return Err(Error::Config(format!("{} exists and is not empty (use --force)", dir.display())));
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn to_value<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(v)?)
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let started = RunManifest::start("synth", serde_json::Value::Null, a.seed);
    let spec = SynthSpec {
        kind: match a.mode {
            Mode::Rigid => SceneKind::Rigid,
            Mode::Deform => SceneKind::Deformable,
        },
        n_points: a.points,
        overlap_min: a.overlap,
        overlap_max: a.overlap_max.unwrap_or(a.overlap),
        noise_std: a.noise,
        ..SynthSpec::default()
    };
    spec.validate()?;
    ensure_out_dir(&a.out, a.force)?;
    let pairs = synth_dataset(&spec, a.pairs, a.seed)?;
    save_dataset(&a.out, &pairs)?;
    eprintln!("synth: wrote {} pairs to {}", pairs.len(), a.out.display());
    let mut m = RunManifest {
        config: to_value(&spec)?,
        ..started
    };
    m.outputs.push(matchdiff::data::MANIFEST_FILE.to_string());
    for p in &pairs {
        m.outputs.push(format!("{}_src.ply", p.name));
        m.outputs.push(format!("{}_tgt.ply", p.name));
        if p.gt_flow.is_some() {
            m.outputs.push(format!("{}_flow.ply", p.name));
        }
    }
    m.finish(&a.out)
}

/// Path of the model configuration stored next to a checkpoint.
pub fn model_config_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("json")
}

pub fn load_model(ckpt: &Path) -> Result<Model> {
    if !ckpt.exists() {
        return Err(Error::Checkpoint(format!("checkpoint {} not found", ckpt.display())));
    }
    let params = load_checkpoint(ckpt)?;
    let cfg_path = model_config_path(ckpt);
    let text = fs::read_to_string(&cfg_path)
        .map_err(|e| Error::Checkpoint(format!("model config {}: {e}", cfg_path.display())))?;
    let config: ModelConfig = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let model = Model { params, config };
    model.check_params()?;
    Ok(model)
}

pub fn save_model(model: &Model, ckpt: &Path) -> Result<()> {
    save_checkpoint(&model.params, ckpt)?;
    write_atomic(&model_config_path(ckpt), serde_json::to_string_pretty(&model.config)?.as_bytes())
}

pub fn read_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_json(&fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?),
        None => Ok(RunConfig::default()),
    }
}

pub fn prepare_all(pairs: &[ScenePair], model: &ModelConfig) -> Result<Vec<PreparedPair>> {
    pairs.par_iter().map(|p| prepare_pair(p, &model.encoder)).collect()
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = read_config(a.config.as_deref())?;
    let started = RunManifest::start("train", to_value(&cfg)?, cfg.seed);
    let pairs = load_dataset(&a.data)?;
    fs::create_dir_all(&a.out)?;
    let model_cfg = cfg.model();
    let prepared = prepare_all(&pairs, &model_cfg)?;
    let mut model = Model::init(model_cfg, cfg.seed)?;
    let s = cfg.schedule.build()?;
    let curve = train(&prepared, &mut model, &s, &cfg.train, |step, l| {
        if step % 50 == 0 {
            eprintln!(
                "train: step {step} loss {:.5} simple {:.5} matching {:.5} warp {:.4}",
                l.total, l.simple, l.matching, l.warp
            );
        }
    })?;
    let ckpt = a.out.join("model.ckpt");
    save_model(&model, &ckpt)?;
    let mut csv = String::from("step,total,simple,matching,warp\n");
    for (k, l) in curve.iter().enumerate() {
        csv.push_str(&format!("{},{},{},{},{}\n", k + 1, l.total, l.simple, l.matching, l.warp));
    }
    write_atomic(&a.out.join("loss.csv"), csv.as_bytes())?;
    eprintln!("train: {} steps, checkpoint {}", curve.len(), ckpt.display());
    let mut m = started;
    m.outputs = vec!["model.ckpt".into(), "model.json".into(), "loss.csv".into()];
    m.finish(&a.out)
}

/// Sampled result for one pair, in original point indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub name: String,
    pub correspondences: Vec<Match>,
    pub transform: RigidTransform,
}

impl Prediction {
    pub fn index_pairs(&self) -> Vec<(usize, usize)> {
        self.correspondences.iter().map(|m| (m.i, m.j)).collect()
    }
}

/// Sample every pair in parallel. Pair `k` draws its noise from a seed
/// derived from `(seed, k)`, so results do not depend on scheduling.
pub fn predict_dataset(pairs: &[PreparedPair], model: &Model, cfg: &SampleConfig, seed: u64) -> Result<Vec<Prediction>> {
    let s = model.config.schedule.build()?;
    let tau = make_tau(s.steps(), cfg.steps, cfg.eta)?;
    pairs
        .par_iter()
        .enumerate()
        .map(|(k, pp)| {
            let p = model.encode(&pp.src)?;
            let q = model.encode(&pp.tgt)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, k as u64));
            let out = reverse_sample(&p, &q, model, &s, &tau, cfg, &mut rng)?;
            let correspondences = out
                .correspondences
                .iter()
                .map(|m| Match {
                    i: pp.src.origin_indices[m.i],
                    j: pp.tgt.origin_indices[m.j],
                    score: m.score,
                })
                .collect();
            Ok(Prediction {
                name: pp.name.clone(),
                correspondences,
                transform: out.transform,
            })
        })
        .collect()
}

pub fn thresholds_for(pairs: &[ScenePair]) -> Thresholds {
    let mut th = match pairs.first() {
        Some(p) if !p.is_rigid() => Thresholds::deformable(),
        _ => Thresholds::rigid(),
    };
    if let Some(p) = pairs.first() {
        th.sigma = p.sigma;
    }
    th
}

pub fn evaluate_all(pairs: &[ScenePair], preds: &[Prediction]) -> Result<EvalReport> {
    if pairs.len() != preds.len() {
        return Err(Error::Schema(format!("{} predictions for {} pairs", preds.len(), pairs.len())));
    }
    let th = thresholds_for(pairs);
    let per_pair = pairs
        .iter()
        .zip(preds)
        .map(|(pair, pred)| {
            if pair.name != pred.name {
                return Err(Error::Schema(format!("prediction {} does not match pair {}", pred.name, pair.name)));
            }
            let mut t = th;
            t.sigma = pair.sigma;
            evaluate_prediction(pair, &pred.index_pairs(), Some(&pred.transform), &t)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::new(per_pair, th))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TransformEntry {
    name: String,
    transform: [[f64; 4]; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TransformFile {
    schema: u32,
    pairs: Vec<TransformEntry>,
}

fn corr_csv(ms: &[Match]) -> String {
    let mut s = String::from("i,j,score\n");
    for m in ms {
        s.push_str(&format!("{},{},{:?}\n", m.i, m.j, m.score));
    }
    s
}

fn parse_corr_csv(text: &str, file: &str) -> Result<Vec<Match>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Parse {
            line: ln + 1,
            msg: format!("{file}: expected i,j,score"),
        };
        if f.len() != 3 {
            return Err(bad());
        }
        out.push(Match {
            i: f[0].trim().parse().map_err(|_| bad())?,
            j: f[1].trim().parse().map_err(|_| bad())?,
            score: f[2].trim().parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

pub fn cmd_sample(a: &SampleArgs) -> Result<()> {
    let cfg = SampleConfig {
        init_mode: a.init.into(),
        steps: a.steps,
        eta: a.eta,
        formula: a.formula.into(),
        top_k: a.top_k,
        mutual: false,
        procrustes_k: a.procrustes_k,
    };
    cfg.validate()?;
    let started = RunManifest::start("sample", to_value(&cfg)?, a.seed);
    let model = load_model(&a.ckpt)?;
    let pairs = load_dataset(&a.data)?;
    let prepared = prepare_all(&pairs, &model.config)?;
    let preds = predict_dataset(&prepared, &model, &cfg, a.seed)?;
    fs::create_dir_all(&a.out)?;
    let mut m = started;
    let mut entries = Vec::new();
    for (pair, pred) in pairs.iter().zip(&preds) {
        let corr = format!("{}_corr.csv", pred.name);
        write_atomic(&a.out.join(&corr), corr_csv(&pred.correspondences).as_bytes())?;
        let warped = if pair.is_rigid() {
            rigid_warp(&pair.src, &pred.transform)
        } else {
            let flow = predicted_flow(pair, &pred.index_pairs())?;
            PointCloud::new(pair.src.points.iter().zip(&flow).map(|(p, f)| p + f).collect())
        };
        let ply = format!("{}_warped.ply", pred.name);
        save_ply(&a.out.join(&ply), &warped)?;
        m.outputs.push(corr);
        m.outputs.push(ply);
        entries.push(TransformEntry {
            name: pred.name.clone(),
            transform: pred.transform.to_rows(),
        });
    }
    let tf = TransformFile { schema: 1, pairs: entries };
    write_atomic(&a.out.join(TRANSFORMS_FILE), serde_json::to_string_pretty(&tf)?.as_bytes())?;
    m.outputs.push(TRANSFORMS_FILE.into());
    eprintln!("sample: {} pairs written to {}", preds.len(), a.out.display());
    m.finish(&a.out)
}

pub fn load_predictions(dir: &Path) -> Result<Vec<Prediction>> {
    let text = fs::read_to_string(dir.join(TRANSFORMS_FILE))?;
    let tf: TransformFile = serde_json::from_str(&text).map_err(|e| Error::Schema(e.to_string()))?;
    tf.pairs
        .iter()
        .map(|e| {
            let file = format!("{}_corr.csv", e.name);
            let corr = parse_corr_csv(&fs::read_to_string(dir.join(&file))?, &file)?;
            Ok(Prediction {
                name: e.name.clone(),
                correspondences: corr,
                transform: RigidTransform::from_rows(&e.transform),
            })
        })
        .collect()
}

pub fn write_report(report: &EvalReport, json_path: &Path) -> Result<PathBuf> {
    if let Some(parent) = json_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    write_atomic(json_path, report.to_json()?.as_bytes())?;
    let csv = json_path.with_extension("csv");
    write_atomic(&csv, report.to_csv().as_bytes())?;
    Ok(csv)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let pairs = load_dataset(&a.data)?;
    let preds = load_predictions(&a.pred)?;
    let report = evaluate_all(&pairs, &preds)?;
    let csv = write_report(&report, &a.out)?;
    let ag = &report.aggregate;
    eprintln!(
        "eval: {} pairs, IR {:.4}, FMR {:.4}, RR {}, written to {} and {}",
        ag.pairs,
        ag.ir,
        ag.fmr,
        ag.rr.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into()),
        a.out.display(),
        csv.display()
    );
    Ok(())
}

/// Sample settings for each point of a sweep, labelled by the swept value.
pub fn parse_sweep(spec: &str, base: &SampleConfig) -> Result<(String, Vec<(String, SampleConfig)>)> {
    let (key, values) = match spec.split_once('=') {
        Some((k, v)) => (k.trim(), Some(v)),
        None => (spec.trim(), None),
    };
    let list = |default: &str| -> Vec<String> {
        values
            .unwrap_or(default)
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect()
    };
    let bad = |v: &str| Error::Config(format!("sweep {key}: bad value '{v}'"));
    let mut points = Vec::new();
    match key {
        "steps" => {
            for v in list("1,2,3,10,20,50") {
                let n: usize = v.parse().map_err(|_| bad(&v))?;
                points.push((v, SampleConfig { steps: n, ..base.clone() }));
            }
        }
        "eta" => {
            for v in list("0,0.5,1") {
                let e: f64 = v.parse().map_err(|_| bad(&v))?;
                points.push((v, SampleConfig { eta: e, ..base.clone() }));
            }
        }
        "init" => {
            for v in list("gaussian,backbone") {
                let mode = InitArg::from_str(&v, true).map_err(|_| bad(&v))?;
                points.push((v, SampleConfig { init_mode: mode.into(), ..base.clone() }));
            }
        }
        "formula" => {
            for v in list("standard,swapped") {
                let f = FormulaArg::from_str(&v.replace('_', "-"), true).map_err(|_| bad(&v))?;
                points.push((v, SampleConfig { formula: f.into(), ..base.clone() }));
            }
        }
        other => return Err(Error::Config(format!("unknown sweep key '{other}' (expected steps, eta, init or formula)"))),
    }
    if points.is_empty() {
        return Err(Error::Config(format!("sweep {key} has no values")));
    }
    for (_, c) in &points {
        c.validate()?;
    }
    Ok((key.to_string(), points))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub sweep: String,
    pub value: String,
    pub report: EvalReport,
}

pub fn run_ablation(pairs: &[ScenePair], model: &Model, points: &[(String, SampleConfig)], key: &str, seed: u64) -> Result<Vec<AblationRow>> {
    let prepared = prepare_all(pairs, &model.config)?;
    points
        .iter()
        .map(|(v, cfg)| {
            let preds = predict_dataset(&prepared, model, cfg, seed)?;
            let report = evaluate_all(pairs, &preds)?;
            eprintln!("ablate: {key}={v} IR {:.4}", report.aggregate.ir);
            Ok(AblationRow {
                sweep: key.to_string(),
                value: v.clone(),
                report,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    fn opt(v: Option<f64>) -> String {
        v.map(|x| format!("{x}")).unwrap_or_default()
    }
    let mut s = String::from("sweep,value,pairs,ir,fmr,rr,nfmr\n");
    for r in rows {
        let a = &r.report.aggregate;
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.sweep,
            r.value,
            a.pairs,
            a.ir,
            a.fmr,
            opt(a.rr),
            opt(a.nfmr)
        ));
    }
    s
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let base = SampleConfig {
        steps: a.steps,
        top_k: a.top_k,
        ..SampleConfig::default()
    };
    let (key, points) = parse_sweep(&a.sweep, &base)?;
    let started = RunManifest::start("ablate", serde_json::json!({ "sweep": a.sweep, "base": base }), a.seed);
    let model = load_model(&a.ckpt)?;
    let pairs = load_dataset(&a.data)?;
    let rows = run_ablation(&pairs, &model, &points, &key, a.seed)?;
    fs::create_dir_all(&a.out)?;
    write_atomic(&a.out.join("ablate.csv"), ablation_csv(&rows).as_bytes())?;
    write_atomic(&a.out.join("ablate.json"), serde_json::to_string_pretty(&rows)?.as_bytes())?;
    let mut m = started;
    m.outputs = vec!["ablate.csv".into(), "ablate.json".into()];
    m.finish(&a.out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_parsing() {
        let base = SampleConfig::default();
        let (k, pts) = parse_sweep("steps=1,2,3,10,20,50", &base).unwrap();
        assert_eq!(k, "steps");
        assert_eq!(pts.iter().map(|p| p.1.steps).collect::<Vec<_>>(), vec![1, 2, 3, 10, 20, 50]);
        assert_eq!(parse_sweep("init", &base).unwrap().1.len(), 2);
        assert_eq!(parse_sweep("eta=0,0.25", &base).unwrap().1[1].1.eta, 0.25);
        assert_eq!(parse_sweep("formula", &base).unwrap().1[1].1.formula, StepFormula::Swapped);
        assert!(matches!(parse_sweep("temperature", &base), Err(Error::Config(_))));
        assert!(parse_sweep("eta=2", &base).is_err());
    }

    #[test]
    fn corr_csv_round_trip() {
        let ms = vec![Match { i: 3, j: 1, score: 0.1 + 0.2 }, Match { i: 0, j: 7, score: 1e-300 }];
        assert_eq!(parse_corr_csv(&corr_csv(&ms), "x").unwrap(), ms);
        assert!(parse_corr_csv("i,j,score\n1,2\n", "x").is_err());
    }
}

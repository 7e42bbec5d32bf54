//! End-to-end experiments: data, zoo, fingerprint, transcripts, verdicts,
//! MIR/FIR, and the artifacts written to an output directory.
//!
//! Output layout:
//!
//! ```text
//! <out>/config.toml            effective configuration
//! <out>/manifest.json          model records, calibration/evaluation split
//! <out>/zoo/<id>.json          networks
//! <out>/fingerprint/fingerprint.json, traces.json
//! <out>/transcripts/<id>.json
//! <out>/calibration.json, clusters.json
//! <out>/verdicts.csv, report.txt, report.json, timing.json
//! <out>/curves/core_trace.csv, curves/score_gap.csv
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{make_synthetic, split_225, SplitPlan};
use crate::error::{Error, Result, StageExt};
use crate::fingerprint::{generate_fingerprint, CoreGenConfig, CoreTrace, Fingerprint, FingerprintRun, InitStrategy};
use crate::identify::{
    agglomerative, calibrate_thresholds, decide, kmeans, query_suspect, Calibration, ClusterModel, Method, ModelGroup,
    SuspectTranscript, Verdict,
};
use crate::io::{load_json, save_json, write_text};
use crate::nn::{softmax, Activation, ArchSpec, Network, PgdConfig, TrainConfig};
use crate::seed::derive_seed;
use crate::stats::{mean, spearman};
use crate::zoo::{build_zoo, KindCounts, ModelKind, ModelRecord, Zoo, ZooConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub n_classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    pub spread: f64,
    /// Homologous/victim training-set overlap ratio.
    pub overlap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZooSettings {
    pub counts: KindCounts,
    pub victim_hidden: Vec<usize>,
    pub victim_activation: Activation,
    pub alt_hidden: Vec<usize>,
    pub alt_activation: Activation,
    pub train: TrainConfig,
    pub fine_tune_epochs: usize,
    pub fine_tune_learning_rate: f64,
    pub prune_fraction: f64,
    pub adv_epochs: usize,
    pub pgd: PgdConfig,
    pub extract_epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterAlgorithm {
    Kmeans,
    Agglomerative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifyConfig {
    pub methods: Vec<Method>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
    pub clusters: usize,
    pub cluster_algorithm: ClusterAlgorithm,
    pub kmeans_max_iters: usize,
    /// Compare post-softmax probabilities instead of raw logits.
    pub use_probabilities: bool,
}

/// Every knob of one experiment. Seeds inside the zoo and core-generation
/// sections are derived from `seed` by stage name and overwritten.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub zoo: ZooSettings,
    pub coregen: CoreGenConfig,
    pub identify: IdentifyConfig,
}

impl ExperimentConfig {
    /// The desk-scale demo: 5 classes, 16 dimensions, 24 suspects.
    pub fn demo() -> Self {
        let (n_classes, dim) = (5, 16);
        let zoo = ZooConfig::desk(dim, n_classes, 0);
        Self {
            seed: 2024,
            output_dir: None,
            data: DataConfig {
                n_classes,
                dim,
                n_per_class: 400,
                spread: 0.22,
                overlap: 0.0,
            },
            zoo: ZooSettings {
                counts: zoo.counts,
                victim_hidden: zoo.victim_arch.hidden,
                victim_activation: zoo.victim_arch.activation,
                alt_hidden: zoo.alt_arch.hidden,
                alt_activation: zoo.alt_arch.activation,
                train: zoo.train,
                fine_tune_epochs: zoo.fine_tune_epochs,
                fine_tune_learning_rate: zoo.fine_tune_learning_rate,
                prune_fraction: zoo.prune_fraction,
                adv_epochs: zoo.adv_epochs,
                pgd: zoo.pgd,
                extract_epochs: zoo.extract_epochs,
            },
            coregen: CoreGenConfig {
                theta: 0.03,
                outer_max_epochs: 1000,
                ..CoreGenConfig::default()
            },
            identify: IdentifyConfig {
                methods: vec![Method::L1, Method::Cos, Method::Cluster],
                top_k: None,
                clusters: 3,
                cluster_algorithm: ClusterAlgorithm::Kmeans,
                kmeans_max_iters: 100,
                use_probabilities: false,
            },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("experiment config serializes to TOML")
    }

    pub fn zoo_config(&self) -> ZooConfig {
        let z = &self.zoo;
        ZooConfig {
            counts: z.counts.clone(),
            victim_arch: ArchSpec::new(
                self.data.dim,
                &z.victim_hidden,
                self.data.n_classes,
                z.victim_activation,
            ),
            alt_arch: ArchSpec::new(self.data.dim, &z.alt_hidden, self.data.n_classes, z.alt_activation),
            train: z.train.clone(),
            fine_tune_epochs: z.fine_tune_epochs,
            fine_tune_learning_rate: z.fine_tune_learning_rate,
            prune_fraction: z.prune_fraction,
            adv_epochs: z.adv_epochs,
            pgd: z.pgd,
            extract_epochs: z.extract_epochs,
            seed: derive_seed(self.seed, "zoo"),
        }
    }

    /// Core generation settings with the derived init seed.
    pub fn coregen_config(&self) -> CoreGenConfig {
        let seed = derive_seed(self.seed, "coregen");
        let init = match self.coregen.init {
            InitStrategy::FromData { .. } => InitStrategy::FromData { seed },
            InitStrategy::UniformNoise { .. } => InitStrategy::UniformNoise { seed },
        };
        CoreGenConfig {
            init,
            ..self.coregen.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.zoo_config().validate()?;
        self.coregen.validate()?;
        if self.identify.methods.is_empty() {
            return Err(Error::InvalidConfig("no identification method selected".into()));
        }
        if self.identify.clusters < 2 {
            return Err(Error::InvalidConfig("clustering needs k >= 2".into()));
        }
        if let Some(k) = self.identify.top_k {
            if k < 2 || k > self.data.n_classes {
                return Err(Error::InvalidConfig(format!(
                    "top_k {k} must be in 2..={}",
                    self.data.n_classes
                )));
            }
        }
        let counts = &self.zoo.counts;
        if counts.hm_sa + counts.hm_da < 2 {
            return Err(Error::InvalidConfig(
                "need at least two homologous models to calibrate and evaluate".into(),
            ));
        }
        Ok(())
    }
}

/// A verdict plus the ground-truth kind of the suspect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRow {
    pub verdict: Verdict,
    pub kind: ModelKind,
}

/// Missed identification rate: unflagged piracy models over all piracy models.
pub fn compute_mir(rows: &[VerdictRow]) -> Result<f64> {
    let piracy: Vec<_> = rows.iter().filter(|r| r.kind.is_piracy()).collect();
    if piracy.is_empty() {
        return Err(Error::InsufficientData("no piracy models among verdicts".into()));
    }
    Ok(piracy.iter().filter(|r| !r.verdict.is_piracy).count() as f64 / piracy.len() as f64)
}

/// False identification rate: flagged homologous models over all homologous models.
pub fn compute_fir(rows: &[VerdictRow]) -> Result<f64> {
    let hm: Vec<_> = rows.iter().filter(|r| !r.kind.is_piracy()).collect();
    if hm.is_empty() {
        return Err(Error::InsufficientData("no homologous models among verdicts".into()));
    }
    Ok(hm.iter().filter(|r| r.verdict.is_piracy).count() as f64 / hm.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindBreakdown {
    pub kind: ModelKind,
    pub total: usize,
    pub flagged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub mir: f64,
    pub fir: f64,
    pub per_kind: Vec<KindBreakdown>,
}

fn summarize(method: Method, rows: &[VerdictRow]) -> Result<MethodSummary> {
    let rows: Vec<VerdictRow> = rows.iter().filter(|r| r.verdict.method == method).cloned().collect();
    let mut per_kind: BTreeMap<ModelKind, (usize, usize)> = BTreeMap::new();
    for r in &rows {
        let e = per_kind.entry(r.kind).or_default();
        e.0 += 1;
        e.1 += r.verdict.is_piracy as usize;
    }
    Ok(MethodSummary {
        method,
        mir: compute_mir(&rows)?,
        fir: compute_fir(&rows)?,
        per_kind: per_kind
            .into_iter()
            .map(|(kind, (total, flagged))| KindBreakdown { kind, total, flagged })
            .collect(),
    })
}

/// Per-label score/radius agreement over the checkpoint log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelTrend {
    pub label: usize,
    pub checkpoints: usize,
    pub spearman: Option<f64>,
    pub final_radius: f64,
    pub final_score: f64,
    pub final_confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsightSummary {
    pub trends: Vec<LabelTrend>,
    pub mean_l1_piracy: f64,
    pub mean_l1_homologous: f64,
    pub mean_cos_piracy: f64,
    pub mean_cos_homologous: f64,
    /// Calibration margins with the optimized core points.
    pub core_margin_l1: f64,
    pub core_margin_cos: f64,
    /// Calibration margins with the unoptimized starting points.
    pub random_margin_l1: f64,
    pub random_margin_cos: f64,
    /// Mean |score difference| to the victim, homologous minus piracy,
    /// with points after the first and third burst.
    pub score_gap_core1: f64,
    pub score_gap_core3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZooReport {
    pub seed: u64,
    pub model_counts: Vec<(ModelKind, usize)>,
    pub model_accuracy_min: f64,
    pub calibration_ids: Vec<String>,
    pub evaluation_ids: Vec<String>,
    pub calibration: Calibration,
    pub methods: Vec<MethodSummary>,
    pub insight: InsightSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Everything an experiment produced.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub split: SplitPlan,
    pub zoo: Zoo,
    pub run: FingerprintRun,
    pub victim_transcript: SuspectTranscript,
    pub transcripts: Vec<(SuspectTranscript, ModelKind)>,
    pub cluster_model: Option<ClusterModel>,
    pub verdicts: Vec<VerdictRow>,
    pub report: ZooReport,
    pub timing: Vec<StageTiming>,
}

fn transcript_for(id: &str, net: &Network, fp: &Fingerprint, probabilities: bool) -> Result<SuspectTranscript> {
    let t = query_suspect(id, net, fp)?;
    if !probabilities {
        return Ok(t);
    }
    SuspectTranscript::new(t.model_id, t.labels, t.outputs.iter().map(|r| softmax(r)).collect())
}

/// Calibration takes the first half (rounded up) of each kind, evaluation the rest.
pub fn calibration_split(suspects: &[ModelRecord]) -> (Vec<usize>, Vec<usize>) {
    let mut by_kind: BTreeMap<ModelKind, Vec<usize>> = BTreeMap::new();
    for (i, m) in suspects.iter().enumerate() {
        by_kind.entry(m.kind).or_default().push(i);
    }
    let (mut cal, mut eval) = (Vec::new(), Vec::new());
    for idx in by_kind.values() {
        let half = idx.len().div_ceil(2);
        cal.extend_from_slice(&idx[..half]);
        eval.extend_from_slice(&idx[half..]);
    }
    cal.sort_unstable();
    eval.sort_unstable();
    (cal, eval)
}

/// Mean absolute target-score difference to the victim on `fp`, for
/// homologous and piracy suspects respectively, per core point.
fn score_gaps(victim: &Network, suspects: &[ModelRecord], fp: &Fingerprint) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = fp.len();
    let (mut hm, mut pm) = (vec![0.0; n], vec![0.0; n]);
    let (mut n_hm, mut n_pm) = (0usize, 0usize);
    let victim_scores: Vec<f64> = fp
        .core_points
        .iter()
        .map(|c| victim.forward(&c.point).map(|z| z[c.label]))
        .collect::<Result<_>>()?;
    for m in suspects {
        let acc = if m.kind.is_piracy() {
            n_pm += 1;
            &mut pm
        } else {
            n_hm += 1;
            &mut hm
        };
        for (i, c) in fp.core_points.iter().enumerate() {
            let z = m.net.forward(&c.point)?;
            acc[i] += (victim_scores[i] - z[c.label]).abs();
        }
    }
    hm.iter_mut().for_each(|v| *v /= n_hm.max(1) as f64);
    pm.iter_mut().for_each(|v| *v /= n_pm.max(1) as f64);
    Ok((hm, pm))
}

fn calibrate_with(
    victim: &Network,
    zoo: &Zoo,
    cal: &[usize],
    fp: &Fingerprint,
    probabilities: bool,
) -> Result<Calibration> {
    let vt = transcript_for("victim", victim, fp, probabilities)?;
    let population = cal
        .iter()
        .map(|&i| {
            let m = &zoo.suspects[i];
            Ok((transcript_for(&m.id, &m.net, fp, probabilities)?, m.kind.group()))
        })
        .collect::<Result<Vec<_>>>()?;
    calibrate_thresholds(&vt, &population)
}

/// Synthetic data and the 2:2:1 split, both seeded from the experiment seed.
pub fn build_split(cfg: &ExperimentConfig) -> Result<SplitPlan> {
    let d = &cfg.data;
    let data = make_synthetic(
        d.n_classes,
        d.dim,
        d.n_per_class,
        d.spread,
        derive_seed(cfg.seed, "data"),
    )
    .stage("data")?;
    split_225(&data, d.overlap, derive_seed(cfg.seed, "split")).stage("split")
}

/// Runs the full protocol and, when `output_dir` is set, writes all artifacts.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Experiment> {
    cfg.validate().stage("config")?;
    let mut timing = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |stage: &str, timing: &mut Vec<StageTiming>| {
        timing.push(StageTiming {
            stage: stage.into(),
            seconds: clock.elapsed().as_secs_f64(),
        });
        clock = Instant::now();
    };

    let split = build_split(cfg)?;
    lap("data", &mut timing);

    let zoo = build_zoo(&split, &cfg.zoo_config()).stage("zoo")?;
    lap("zoo", &mut timing);

    let core_cfg = cfg.coregen_config();
    let run = generate_fingerprint(
        &zoo.victim.net,
        &zoo.victim.id,
        &core_cfg,
        Some(&split.victim),
        cfg.identify.top_k,
    )
    .stage("fingerprint")?;
    lap("fingerprint", &mut timing);

    let probabilities = cfg.identify.use_probabilities;
    let fp = &run.fingerprint;
    let victim_transcript = transcript_for(&zoo.victim.id, &zoo.victim.net, fp, probabilities).stage("query")?;
    let transcripts = zoo
        .suspects
        .iter()
        .map(|m| Ok((transcript_for(&m.id, &m.net, fp, probabilities)?, m.kind)))
        .collect::<Result<Vec<_>>>()
        .stage("query")?;

    let (cal, eval) = calibration_split(&zoo.suspects);
    let calibration = calibrate_with(&zoo.victim.net, &zoo, &cal, fp, probabilities).stage("calibrate")?;

    let cluster_model = if cfg.identify.methods.contains(&Method::Cluster) {
        let points: Vec<Vec<f64>> = cal.iter().map(|&i| transcripts[i].0.flatten()).collect();
        let groups: Vec<ModelGroup> = cal.iter().map(|&i| transcripts[i].1.group()).collect();
        let k = cfg.identify.clusters;
        let model = match cfg.identify.cluster_algorithm {
            ClusterAlgorithm::Kmeans => kmeans(
                &points,
                &groups,
                k,
                derive_seed(cfg.seed, "kmeans"),
                cfg.identify.kmeans_max_iters,
            ),
            ClusterAlgorithm::Agglomerative => agglomerative(&points, &groups, k),
        }
        .stage("cluster")?;
        Some(model)
    } else {
        None
    };
    lap("identify", &mut timing);

    let mut verdicts = Vec::new();
    for &method in &cfg.identify.methods {
        for &i in &eval {
            let (t, kind) = &transcripts[i];
            let verdict = match method {
                Method::Cluster => cluster_model.as_ref().expect("fitted above").classify(t),
                _ => decide(&victim_transcript, t, &calibration.thresholds, method),
            }
            .stage("decide")?;
            verdicts.push(VerdictRow { verdict, kind: *kind });
        }
    }
    let methods = cfg
        .identify
        .methods
        .iter()
        .map(|&m| summarize(m, &verdicts))
        .collect::<Result<Vec<_>>>()
        .stage("metrics")?;

    let insight = insight_summary(
        &zoo,
        &run,
        &transcripts,
        &victim_transcript,
        &cal,
        &calibration,
        probabilities,
    )
    .stage("insight")?;
    lap("report", &mut timing);

    let mut model_counts: Vec<(ModelKind, usize)> = Vec::new();
    for m in &zoo.suspects {
        match model_counts.last_mut() {
            Some((k, n)) if *k == m.kind => *n += 1,
            _ => model_counts.push((m.kind, 1)),
        }
    }
    let report = ZooReport {
        seed: cfg.seed,
        model_counts,
        model_accuracy_min: zoo.all().map(|m| m.accuracy).fold(f64::INFINITY, f64::min),
        calibration_ids: cal.iter().map(|&i| zoo.suspects[i].id.clone()).collect(),
        evaluation_ids: eval.iter().map(|&i| zoo.suspects[i].id.clone()).collect(),
        calibration,
        methods,
        insight,
    };

    let experiment = Experiment {
        config: cfg.clone(),
        split,
        zoo,
        run,
        victim_transcript,
        transcripts,
        cluster_model,
        verdicts,
        report,
        timing,
    };
    if let Some(dir) = &cfg.output_dir {
        experiment.write(dir).stage("write")?;
    }
    Ok(experiment)
}

fn insight_summary(
    zoo: &Zoo,
    run: &FingerprintRun,
    transcripts: &[(SuspectTranscript, ModelKind)],
    victim_t: &SuspectTranscript,
    cal: &[usize],
    calibration: &Calibration,
    probabilities: bool,
) -> Result<InsightSummary> {
    let kept = run.fingerprint.labels();
    let trends = run
        .traces
        .iter()
        .filter(|t| kept.contains(&t.label))
        .map(|t| {
            let scores: Vec<f64> = t.checkpoints.iter().map(|c| c.score).collect();
            let radii: Vec<f64> = t.checkpoints.iter().map(|c| c.radius).collect();
            let last = t.checkpoints.last().expect("non-empty trace");
            LabelTrend {
                label: t.label,
                checkpoints: t.checkpoints.len(),
                spearman: spearman(&scores, &radii),
                final_radius: last.radius,
                final_score: last.score,
                final_confidence: last.confidence,
            }
        })
        .collect();

    let (mut l1, mut cos) = ((Vec::new(), Vec::new()), (Vec::new(), Vec::new()));
    for (t, kind) in transcripts {
        let dl = crate::identify::l1_dist(victim_t, t)?;
        let dc = crate::identify::cos_dist(victim_t, t)?;
        if kind.is_piracy() {
            l1.0.push(dl);
            cos.0.push(dc);
        } else {
            l1.1.push(dl);
            cos.1.push(dc);
        }
    }

    let victim = &zoo.victim.net;
    let random_fp = run.at_checkpoint(victim, 0)?;
    let random = calibrate_with(victim, zoo, cal, &random_fp, probabilities)?;

    let gap = |index: usize| -> Result<f64> {
        let fp = run.at_checkpoint(victim, index)?;
        let (hm, pm) = score_gaps(victim, &zoo.suspects, &fp)?;
        Ok(mean(&hm) - mean(&pm))
    };

    Ok(InsightSummary {
        trends,
        mean_l1_piracy: mean(&l1.0),
        mean_l1_homologous: mean(&l1.1),
        mean_cos_piracy: mean(&cos.0),
        mean_cos_homologous: mean(&cos.1),
        core_margin_l1: calibration.l1.margin,
        core_margin_cos: calibration.cos.margin,
        random_margin_l1: random.l1.margin,
        random_margin_cos: random.cos.margin,
        score_gap_core1: gap(1)?,
        score_gap_core3: gap(3)?,
    })
}

/// One manifest line per model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub kind: ModelKind,
    pub lineage: Option<String>,
    pub seed: u64,
    pub accuracy: f64,
    pub path: PathBuf,
    pub role: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub models: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<PathBuf>,
}

pub fn zoo_manifest(zoo: &Zoo, seed: u64, cal: &[String]) -> Manifest {
    Manifest {
        seed,
        models: zoo
            .all()
            .map(|m| ManifestEntry {
                id: m.id.clone(),
                kind: m.kind,
                lineage: m.lineage.clone(),
                seed: m.seed,
                accuracy: m.accuracy,
                path: PathBuf::from("zoo").join(format!("{}.json", m.id)),
                role: if m.kind == ModelKind::Victim {
                    "victim".into()
                } else if cal.contains(&m.id) {
                    "calibration".into()
                } else {
                    "evaluation".into()
                },
            })
            .collect(),
        fingerprint: None,
    }
}

/// Writes every network plus the manifest.
pub fn write_zoo(dir: &Path, zoo: &Zoo, manifest: &Manifest) -> Result<()> {
    for m in zoo.all() {
        save_json(dir.join("zoo").join(format!("{}.json", m.id)), &m.net)?;
    }
    save_json(dir.join("manifest.json"), manifest)
}

/// Reloads a zoo written by [`write_zoo`].
pub fn read_zoo(dir: &Path) -> Result<(Manifest, Zoo)> {
    let manifest: Manifest = load_json(dir.join("manifest.json"))?;
    let mut victim = None;
    let mut suspects = Vec::new();
    for e in &manifest.models {
        let record = ModelRecord {
            id: e.id.clone(),
            kind: e.kind,
            lineage: e.lineage.clone(),
            seed: e.seed,
            accuracy: e.accuracy,
            net: load_json(dir.join(&e.path))?,
        };
        if e.kind == ModelKind::Victim {
            victim = Some(record);
        } else {
            suspects.push(record);
        }
    }
    let victim = victim.ok_or_else(|| Error::Schema {
        path: dir.join("manifest.json"),
        message: "manifest lists no victim".into(),
    })?;
    Ok((manifest, Zoo { victim, suspects }))
}

pub const VERDICT_HEADER: &str = "model_id,kind_truth,method,score,is_piracy";

pub fn verdicts_csv(rows: &[VerdictRow]) -> String {
    let mut out = String::from(VERDICT_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:?},{}",
            r.verdict.model_id, r.kind, r.verdict.method, r.verdict.score, r.verdict.is_piracy
        );
    }
    out
}

/// Parses a verdict CSV written by [`verdicts_csv`].
pub fn parse_verdicts_csv(text: &str) -> Result<Vec<VerdictRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(VERDICT_HEADER) {
        return Err(Error::Parse {
            offset: 0,
            message: "unexpected verdict CSV header".into(),
        });
    }
    let mut offset = VERDICT_HEADER.len() + 1;
    let mut rows = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        let parsed = (|| -> Option<VerdictRow> {
            if fields.len() != 5 {
                return None;
            }
            Some(VerdictRow {
                verdict: Verdict {
                    model_id: fields[0].to_string(),
                    method: fields[2].parse().ok()?,
                    score: fields[3].parse().ok()?,
                    is_piracy: fields[4].parse().ok()?,
                },
                kind: fields[1].parse().ok()?,
            })
        })();
        rows.push(parsed.ok_or_else(|| Error::Parse {
            offset,
            message: format!("malformed verdict row {line:?}"),
        })?);
        offset += line.len() + 1;
    }
    Ok(rows)
}

/// MIR/FIR per method recomputed from persisted verdict rows.
pub fn summaries_from_verdicts(rows: &[VerdictRow]) -> Result<Vec<MethodSummary>> {
    let mut methods: Vec<Method> = Vec::new();
    for r in rows {
        if !methods.contains(&r.verdict.method) {
            methods.push(r.verdict.method);
        }
    }
    methods.into_iter().map(|m| summarize(m, rows)).collect()
}

pub fn render_report(report: &ZooReport, cfg: &ExperimentConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# fingerprint identification report");
    let _ = writeln!(s, "seed: {}", report.seed);
    let total: usize = report.model_counts.iter().map(|(_, n)| n).sum();
    let _ = writeln!(s, "suspects: {total}");
    for (kind, n) in &report.model_counts {
        let _ = writeln!(s, "  {kind:<9} {n}");
    }
    let _ = writeln!(s, "min model accuracy: {:.4}", report.model_accuracy_min);
    let _ = writeln!(
        s,
        "calibration models ({}): {}",
        report.calibration_ids.len(),
        report.calibration_ids.join(" ")
    );
    let _ = writeln!(
        s,
        "evaluation models ({}): {}",
        report.evaluation_ids.len(),
        report.evaluation_ids.join(" ")
    );
    let c = &report.calibration;
    let _ = writeln!(
        s,
        "thresholds: d1 = {:.6} (margin {:.6}{}), d2 = {:.6} (margin {:.6}{})",
        c.thresholds.d1,
        c.l1.margin,
        if c.l1.overlapping { ", overlapping" } else { "" },
        c.thresholds.d2,
        c.cos.margin,
        if c.cos.overlapping { ", overlapping" } else { "" },
    );
    let _ = writeln!(s);
    for m in &report.methods {
        let _ = writeln!(s, "method {}: MIR = {:.4}, FIR = {:.4}", m.method, m.mir, m.fir);
        for k in &m.per_kind {
            let _ = writeln!(s, "  {:<9} flagged {}/{}", k.kind, k.flagged, k.total);
        }
    }
    let i = &report.insight;
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "core points (label, checkpoints, spearman(score, radius), radius, score, confidence):"
    );
    for t in &i.trends {
        let rho = t.spearman.map_or("n/a".to_string(), |r| format!("{r:.4}"));
        let _ = writeln!(
            s,
            "  {} {} {} {:.6} {:.6} {:.6}",
            t.label, t.checkpoints, rho, t.final_radius, t.final_score, t.final_confidence
        );
    }
    let _ = writeln!(
        s,
        "mean l1_dist: piracy {:.6}, homologous {:.6}",
        i.mean_l1_piracy, i.mean_l1_homologous
    );
    let _ = writeln!(
        s,
        "mean cos_dist: piracy {:.6}, homologous {:.6}",
        i.mean_cos_piracy, i.mean_cos_homologous
    );
    let _ = writeln!(
        s,
        "calibration margin l1: core {:.6}, random {:.6}",
        i.core_margin_l1, i.random_margin_l1
    );
    let _ = writeln!(
        s,
        "calibration margin cos: core {:.6}, random {:.6}",
        i.core_margin_cos, i.random_margin_cos
    );
    let _ = writeln!(
        s,
        "score gap (homologous - piracy): core1 {:.6}, core3 {:.6}",
        i.score_gap_core1, i.score_gap_core3
    );
    let _ = writeln!(s);
    let _ = writeln!(s, "## effective configuration");
    s.push_str(&cfg.to_toml());
    s
}

impl Experiment {
    /// Writes the full artifact tree under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut manifest = zoo_manifest(&self.zoo, self.config.seed, &self.report.calibration_ids);
        manifest.fingerprint = Some(PathBuf::from("fingerprint/fingerprint.json"));
        write_zoo(dir, &self.zoo, &manifest)?;
        write_text(dir.join("config.toml"), &self.config.to_toml())?;
        save_json(dir.join("fingerprint/fingerprint.json"), &self.run.fingerprint)?;
        save_json(dir.join("fingerprint/traces.json"), &self.run.traces)?;
        save_json(dir.join("transcripts/victim.json"), &self.victim_transcript)?;
        for (t, _) in &self.transcripts {
            save_json(dir.join("transcripts").join(format!("{}.json", t.model_id)), t)?;
        }
        save_json(dir.join("calibration.json"), &self.report.calibration)?;
        if let Some(cm) = &self.cluster_model {
            save_json(dir.join("clusters.json"), cm)?;
        }
        write_text(dir.join("verdicts.csv"), &verdicts_csv(&self.verdicts))?;
        save_json(dir.join("report.json"), &self.report)?;
        write_text(dir.join("report.txt"), &render_report(&self.report, &self.config))?;
        save_json(dir.join("timing.json"), &self.timing)?;
        emit_insight_curves(&self.zoo, &self.run.traces, &self.run.fingerprint, &dir.join("curves"))?;
        Ok(())
    }
}

/// Writes `core_trace.csv` (label, epoch, score, confidence, radius per
/// checkpoint) and `score_gap.csv` (per label and checkpoint: radius and the
/// mean |score difference| to the victim for homologous and piracy models).
pub fn emit_insight_curves(zoo: &Zoo, traces: &[CoreTrace], fp: &Fingerprint, dir: &Path) -> Result<Vec<PathBuf>> {
    if traces.is_empty() || traces.iter().any(|t| t.checkpoints.is_empty()) {
        return Err(Error::InsufficientData("missing checkpoint log".into()));
    }
    let mut trace_csv = String::from("label,epoch,score,confidence,radius\n");
    for t in traces {
        for c in &t.checkpoints {
            let _ = writeln!(
                trace_csv,
                "{},{},{:?},{:?},{:?}",
                t.label, c.epoch, c.score, c.confidence, c.radius
            );
        }
    }

    let mut gap_csv = String::from("label,checkpoint,epoch,radius,hm_gap,pm_gap\n");
    let max_ck = traces.iter().map(|t| t.checkpoints.len()).max().unwrap_or(0);
    let run = FingerprintRun {
        fingerprint: fp.clone(),
        traces: traces.to_vec(),
    };
    let mut rows: Vec<(usize, usize, String)> = Vec::new();
    for index in 0..max_ck {
        let ck_fp = run.at_checkpoint(&zoo.victim.net, index)?;
        let (hm, pm) = score_gaps(&zoo.victim.net, &zoo.suspects, &ck_fp)?;
        for (i, c) in ck_fp.core_points.iter().enumerate() {
            let trace = traces.iter().find(|t| t.label == c.label).expect("label from traces");
            if index >= trace.checkpoints.len() {
                continue;
            }
            rows.push((
                c.label,
                index,
                format!(
                    "{},{},{},{:?},{:?},{:?}",
                    c.label, index, c.epochs_used, c.radius, hm[i], pm[i]
                ),
            ));
        }
    }
    rows.sort_by_key(|r| (r.0, r.1));
    for (_, _, line) in rows {
        gap_csv.push_str(&line);
        gap_csv.push('\n');
    }

    let trace_path = dir.join("core_trace.csv");
    let gap_path = dir.join("score_gap.csv");
    write_text(&trace_path, &trace_csv)?;
    write_text(&gap_path, &gap_csv)?;
    Ok(vec![trace_path, gap_path])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(kind: ModelKind, flagged: bool) -> VerdictRow {
        VerdictRow {
            verdict: Verdict {
                model_id: "m".into(),
                method: Method::Cos,
                score: 0.0,
                is_piracy: flagged,
            },
            kind,
        }
    }

    #[test]
    fn mir_counts_missed_piracy() {
        let all: Vec<_> = (0..12).map(|_| row(ModelKind::PmFa, true)).collect();
        assert_eq!(compute_mir(&all).unwrap(), 0.0);
        let none: Vec<_> = (0..12).map(|_| row(ModelKind::EmSaL, false)).collect();
        assert_eq!(compute_mir(&none).unwrap(), 1.0);
        let some: Vec<_> = (0..12).map(|i| row(ModelKind::PmP, i >= 3)).collect();
        assert_eq!(compute_mir(&some).unwrap(), 0.25);
        assert!(compute_mir(&[row(ModelKind::HmSa, false)]).is_err());
    }

    #[test]
    fn fir_counts_flagged_homologous() {
        let clean: Vec<_> = (0..8).map(|_| row(ModelKind::HmDa, false)).collect();
        assert_eq!(compute_fir(&clean).unwrap(), 0.0);
        let all: Vec<_> = (0..8).map(|_| row(ModelKind::HmSa, true)).collect();
        assert_eq!(compute_fir(&all).unwrap(), 1.0);
        let one: Vec<_> = (0..8).map(|i| row(ModelKind::HmSa, i == 0)).collect();
        assert_eq!(compute_fir(&one).unwrap(), 0.125);
        assert!(compute_fir(&[row(ModelKind::PmFl, true)]).is_err());
    }

    #[test]
    fn verdict_csv_round_trips() {
        let rows = vec![row(ModelKind::HmSa, false), row(ModelKind::EmDaPr, true)];
        let back = parse_verdicts_csv(&verdicts_csv(&rows)).unwrap();
        assert_eq!(back, rows);
        assert!(parse_verdicts_csv("nope\n").is_err());
    }

    #[test]
    fn demo_config_round_trips_through_toml() {
        let cfg = ExperimentConfig::demo();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, back);
        cfg.validate().unwrap();
    }
}

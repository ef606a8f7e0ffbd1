//! Fused prediction, ablation modes and incremental-learning metrics.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::alignment::{
    local_logits, prepare_class_texts, ClassAlignment, ClassTexts, LocalAlignment, LocalConfig, PatchSelection,
};
use crate::corpus::format::write_atomic;
use crate::corpus::{EmbeddingBundle, TokenEmbeddings};
use crate::engine::EngineState;
use crate::linalg::{argmax, cosine, softmax};
use crate::projectors::{Branch, ProjectorStack};
use crate::trainer::TrainerConfig;
use crate::{ordered_map, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Global plus `β` times local with the configured alignment.
    Full,
    /// Raw frozen `[CLS]`/`[EOS]` cosines; no projectors.
    ZeroShot,
    /// Adapted global branch only.
    GlobalOnly,
    /// Uniform plan instead of optimal transport.
    NoOt,
    /// Each selected patch matched to its best attribute.
    NaiveMatch,
    /// Seeded random patch scores.
    RandomSelect,
    /// Patches scored against the class-name prompt.
    PromptSelect,
}

impl Mode {
    pub const ALL: [Mode; 7] = [
        Mode::Full,
        Mode::ZeroShot,
        Mode::GlobalOnly,
        Mode::NoOt,
        Mode::NaiveMatch,
        Mode::RandomSelect,
        Mode::PromptSelect,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::ZeroShot => "zero_shot",
            Mode::GlobalOnly => "global_only",
            Mode::NoOt => "no_ot",
            Mode::NaiveMatch => "naive_match",
            Mode::RandomSelect => "random_select",
            Mode::PromptSelect => "prompt_select",
        }
    }

    /// Whether the local branch contributes to predictions.
    pub fn uses_local(self) -> bool {
        !matches!(self, Mode::ZeroShot | Mode::GlobalOnly)
    }

    /// The local configuration this mode evaluates with.
    pub fn adjust(self, base: &LocalConfig) -> LocalConfig {
        let mut cfg = base.clone();
        match self {
            Mode::NoOt => cfg.alignment = LocalAlignment::Uniform,
            Mode::NaiveMatch => cfg.alignment = LocalAlignment::NaiveMatch,
            Mode::RandomSelect => cfg.selection = PatchSelection::Random,
            Mode::PromptSelect => cfg.selection = PatchSelection::Prompt,
            Mode::Full | Mode::ZeroShot | Mode::GlobalOnly => {}
        }
        cfg
    }

    /// The trainer settings that match this mode's local branch.
    pub fn training_config(self, base: &TrainerConfig) -> TrainerConfig {
        let local = self.adjust(&base.local_config());
        TrainerConfig {
            alignment: local.alignment,
            selection: local.selection,
            beta: if self == Mode::GlobalOnly { 0.0 } else { base.beta },
            ..base.clone()
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub beta: f64,
    pub tau: f64,
    pub local: LocalConfig,
}

impl From<&TrainerConfig> for InferenceConfig {
    fn from(cfg: &TrainerConfig) -> Self {
        Self {
            beta: cfg.beta,
            tau: cfg.tau,
            local: LocalConfig {
                temperature: cfg.fusion_temperature,
                ..cfg.local_config()
            },
        }
    }
}

impl Default for InferenceConfig {
    fn default() -> Self {
        (&TrainerConfig::default()).into()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class_id: u32,
    /// `f_global` over the candidate classes.
    pub global: Vec<f64>,
    /// `f_local`, absent in modes without a local branch.
    pub local: Option<Vec<f64>>,
    /// `f_global + β f_local`.
    pub fused: Vec<f64>,
}

/// A frozen state prepared for scoring many images against a fixed
/// candidate class list.
pub struct Predictor<'a> {
    mode: Mode,
    beta: f64,
    tau: f64,
    local_cfg: LocalConfig,
    dim: usize,
    classes: Vec<u32>,
    visual_global: Option<&'a ProjectorStack>,
    visual_local: Option<&'a ProjectorStack>,
    eos: Vec<Vec<f64>>,
    texts: Vec<ClassTexts>,
}

impl<'a> Predictor<'a> {
    pub fn new(
        state: &'a EngineState,
        bundle: &EmbeddingBundle,
        candidates: &[u32],
        mode: Mode,
        cfg: &InferenceConfig,
    ) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::InvalidArgument("no candidate classes".into()));
        }
        if bundle.dim() != state.dim() {
            return Err(Error::DimensionMismatch {
                expected: state.dim(),
                actual: bundle.dim(),
            });
        }
        if mode != Mode::ZeroShot && state.sessions_trained() == 0 {
            return Err(Error::InvalidArgument(format!("mode {mode} needs a trained session")));
        }
        let sets = candidates
            .iter()
            .map(|&c| {
                bundle
                    .class_index(c)
                    .map(|i| &bundle.classes()[i])
                    .ok_or_else(|| Error::InvalidArgument(format!("class {c} is not in the bundle")))
            })
            .collect::<Result<Vec<_>>>()?;

        let (eos, visual_global) = if mode == Mode::ZeroShot {
            (sets.iter().map(|s| s.eos_embedding.clone()).collect(), None)
        } else {
            let textual = state.stack(Branch::TextualGlobal);
            let eos = sets
                .iter()
                .map(|s| textual.adapt_feature(&s.eos_embedding))
                .collect::<Result<_>>()?;
            (eos, Some(state.stack(Branch::VisualGlobal)))
        };
        let (texts, visual_local) = if mode.uses_local() {
            let textual = state.stack(Branch::TextualLocal);
            let texts = sets
                .iter()
                .map(|s| {
                    let rows = state.attribute_choice(s.class_id).ok_or_else(|| {
                        Error::InvalidArgument(format!("class {} has no bound attributes", s.class_id))
                    })?;
                    prepare_class_texts(s, rows, textual)
                })
                .collect::<Result<_>>()?;
            (texts, Some(state.stack(Branch::VisualLocal)))
        } else {
            (Vec::new(), None)
        };
        Ok(Self {
            mode,
            beta: if mode == Mode::GlobalOnly { 0.0 } else { cfg.beta },
            tau: cfg.tau,
            local_cfg: mode.adjust(&cfg.local),
            dim: state.dim(),
            classes: candidates.to_vec(),
            visual_global,
            visual_local,
            eos,
            texts,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    fn check(&self, image: &TokenEmbeddings) -> Result<()> {
        if image.cls.len() != self.dim || image.patches.cols() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: image.cls.len(),
            });
        }
        Ok(())
    }

    pub fn predict(&self, image: &TokenEmbeddings) -> Result<Prediction> {
        self.check(image)?;
        let v = match self.visual_global {
            Some(stack) => stack.adapt_feature(&image.cls)?,
            None => image.cls.clone(),
        };
        let logits: Vec<f64> = self
            .eos
            .iter()
            .map(|e| cosine(&v, e).map(|c| c / self.tau))
            .collect::<Result<_>>()?;
        let global = softmax(&logits);
        let local = match self.visual_local {
            Some(stack) => Some(local_logits(image, &self.texts, stack, &self.local_cfg)?.probs),
            None => None,
        };
        let fused = match &local {
            Some(l) => global.iter().zip(l).map(|(g, l)| g + self.beta * l).collect(),
            None => global.clone(),
        };
        Ok(Prediction {
            class_id: self.classes[argmax(&fused)],
            global,
            local,
            fused,
        })
    }

    /// Per-class selected patches, plans and scores for one image. Empty in
    /// modes without a local branch.
    pub fn explain(&self, image: &TokenEmbeddings) -> Result<Vec<ClassAlignment>> {
        self.check(image)?;
        match self.visual_local {
            Some(stack) => Ok(local_logits(image, &self.texts, stack, &self.local_cfg)?.alignments),
            None => Ok(Vec::new()),
        }
    }
}

/// Predicts over every class the state has seen.
pub fn predict(
    image: &TokenEmbeddings,
    state: &EngineState,
    bundle: &EmbeddingBundle,
    mode: Mode,
    cfg: &InferenceConfig,
) -> Result<Prediction> {
    Predictor::new(state, bundle, &state.seen_classes(), mode, cfg)?.predict(image)
}

/// `A_{l,b}`: accuracy (percent) on session-`b` classes after stage `l`, for
/// `b <= l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    /// Row `l` (0-based) must hold `l + 1` entries in `[0, 100]`.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        for (l, row) in rows.iter().enumerate() {
            if row.len() != l + 1 {
                return Err(Error::IncompleteMatrix(format!(
                    "stage {} has {} entries, expected {}",
                    l + 1,
                    row.len(),
                    l + 1
                )));
            }
            if let Some(v) = row.iter().find(|v| !(0.0..=100.0).contains(*v)) {
                return Err(Error::InvalidArgument(format!("accuracy {v} outside [0, 100]")));
            }
        }
        Ok(Self { rows })
    }

    pub fn sessions(&self) -> usize {
        self.rows.len()
    }

    /// `A_{l,b}` with 1-based `l` and `b`.
    pub fn get(&self, l: usize, b: usize) -> Option<f64> {
        self.rows.get(l.checked_sub(1)?)?.get(b.checked_sub(1)?).copied()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

/// `F_B = 1/(B-1) Σ_{b<B} max_{b<=l<B} (A_{l,b} - A_{B,b})`.
pub fn forgetting_measure(matrix: &AccuracyMatrix) -> Result<f64> {
    let b_total = matrix.sessions();
    if b_total < 2 {
        return Err(Error::SingleSession);
    }
    let last = &matrix.rows[b_total - 1];
    let mut sum = 0.0;
    for (b, &final_acc) in last.iter().enumerate().take(b_total - 1) {
        let drop = (b..b_total - 1)
            .map(|l| matrix.rows[l][b] - final_acc)
            .fold(f64::NEG_INFINITY, f64::max);
        sum += drop;
    }
    Ok(sum / (b_total - 1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub mode: Mode,
    pub beta: f64,
    /// `A_b`: accuracy over all classes seen after session `b`.
    pub per_session_accuracy: Vec<f64>,
    pub average: f64,
    pub last: f64,
    /// `None` for a single session.
    pub forgetting: Option<f64>,
}

impl SessionReport {
    pub fn new(mode: Mode, beta: f64, per_session_accuracy: Vec<f64>, matrix: &AccuracyMatrix) -> Result<Self> {
        if per_session_accuracy.is_empty() || per_session_accuracy.len() != matrix.sessions() {
            return Err(Error::IncompleteMatrix(format!(
                "{} session accuracies for a {}-stage matrix",
                per_session_accuracy.len(),
                matrix.sessions()
            )));
        }
        let average = per_session_accuracy.iter().sum::<f64>() / per_session_accuracy.len() as f64;
        let last = *per_session_accuracy.last().expect("non-empty");
        let forgetting = match forgetting_measure(matrix) {
            Ok(f) => Some(f),
            Err(Error::SingleSession) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            mode,
            beta,
            per_session_accuracy,
            average,
            last,
            forgetting,
        })
    }
}

fn percent(correct: usize, total: usize) -> f64 {
    100.0 * correct as f64 / total as f64
}

/// Accuracy over all test samples of the given sessions' classes, plus the
/// accuracy restricted to each session's classes (one row of the matrix).
pub fn session_accuracy(
    predictor: &Predictor,
    bundle: &EmbeddingBundle,
    test_indices: &[usize],
    sessions: &[Vec<u32>],
) -> Result<(f64, Vec<f64>)> {
    let origin = |label: u32| sessions.iter().position(|s| s.contains(&label));
    let items: Vec<(usize, usize)> = test_indices
        .iter()
        .filter_map(|&i| origin(bundle.samples()[i].label).map(|b| (i, b)))
        .collect();
    if items.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let predictions = ordered_map(&items, |&(i, _)| predictor.predict(&bundle.samples()[i]));
    let mut correct = vec![0usize; sessions.len()];
    let mut total = vec![0usize; sessions.len()];
    for (p, &(i, b)) in predictions.into_iter().zip(&items) {
        total[b] += 1;
        if p?.class_id == bundle.samples()[i].label {
            correct[b] += 1;
        }
    }
    if total.contains(&0) {
        return Err(Error::EmptyTestSet);
    }
    let overall = percent(correct.iter().sum(), total.iter().sum());
    Ok((
        overall,
        correct.iter().zip(&total).map(|(&c, &t)| percent(c, t)).collect(),
    ))
}

/// Evaluates every stage `l` of `sessions` with the state as it stood after
/// session `l`.
pub fn build_report(
    state: &EngineState,
    sessions: &[Vec<u32>],
    bundle: &EmbeddingBundle,
    test_indices: &[usize],
    mode: Mode,
    cfg: &InferenceConfig,
) -> Result<(SessionReport, AccuracyMatrix)> {
    if sessions.is_empty() {
        return Err(Error::IncompleteMatrix("no sessions".into()));
    }
    if mode != Mode::ZeroShot {
        if state.sessions_trained() < sessions.len() {
            return Err(Error::IncompleteMatrix(format!(
                "{} sessions scheduled, {} trained",
                sessions.len(),
                state.sessions_trained()
            )));
        }
        if state.sessions()[..sessions.len()] != *sessions {
            return Err(Error::InvalidArgument(
                "schedule differs from the trained sessions".into(),
            ));
        }
    }
    let mut per_session = Vec::with_capacity(sessions.len());
    let mut rows = Vec::with_capacity(sessions.len());
    for l in 1..=sessions.len() {
        let stage = state.truncated(l);
        let seen: Vec<u32> = sessions[..l].iter().flatten().copied().collect();
        let predictor = Predictor::new(&stage, bundle, &seen, mode, cfg)?;
        let (overall, row) = session_accuracy(&predictor, bundle, test_indices, &sessions[..l])?;
        per_session.push(overall);
        rows.push(row);
    }
    let matrix = AccuracyMatrix::from_rows(rows)?;
    let beta = if mode.uses_local() { cfg.beta } else { 0.0 };
    Ok((SessionReport::new(mode, beta, per_session, &matrix)?, matrix))
}

#[derive(Serialize)]
struct ReportFile<'a> {
    report: &'a SessionReport,
    matrix: &'a AccuracyMatrix,
}

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const CURVE_CSV: &str = "curve.csv";
pub const MATRIX_CSV: &str = "matrix.csv";

pub fn report_json(report: &SessionReport, matrix: &AccuracyMatrix) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&ReportFile { report, matrix })?;
    s.push('\n');
    Ok(s)
}

pub fn report_csv(report: &SessionReport) -> String {
    let forgetting = report.forgetting.map(|f| format!("{f:.2}")).unwrap_or_default();
    format!(
        "mode,beta,sessions,average,last,forgetting\n{},{},{},{:.2},{:.2},{}\n",
        report.mode,
        report.beta,
        report.per_session_accuracy.len(),
        report.average,
        report.last,
        forgetting
    )
}

pub fn curve_csv(report: &SessionReport) -> String {
    let mut s = String::from("session,accuracy,mode\n");
    for (b, a) in report.per_session_accuracy.iter().enumerate() {
        s.push_str(&format!("{},{a:.2},{}\n", b + 1, report.mode));
    }
    s
}

pub fn matrix_csv(matrix: &AccuracyMatrix) -> String {
    let b_total = matrix.sessions();
    let mut s = String::from("stage");
    for b in 1..=b_total {
        s.push_str(&format!(",session_{b}"));
    }
    s.push('\n');
    for (l, row) in matrix.rows().iter().enumerate() {
        s.push_str(&(l + 1).to_string());
        for b in 0..b_total {
            s.push(',');
            if let Some(v) = row.get(b) {
                s.push_str(&format!("{v:.2}"));
            }
        }
        s.push('\n');
    }
    s
}

/// Writes `report.json`, `report.csv`, `curve.csv` and `matrix.csv` into
/// `dir`.
pub fn write_reports(dir: impl AsRef<Path>, report: &SessionReport, matrix: &AccuracyMatrix) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join(REPORT_JSON), report_json(report, matrix)?.as_bytes())?;
    write_atomic(&dir.join(REPORT_CSV), report_csv(report).as_bytes())?;
    write_atomic(&dir.join(CURVE_CSV), curve_csv(report).as_bytes())?;
    write_atomic(&dir.join(MATRIX_CSV), matrix_csv(matrix).as_bytes())
}

/// Reads the report part of a `report.json`.
pub fn read_report(path: impl AsRef<Path>) -> Result<(SessionReport, AccuracyMatrix)> {
    #[derive(Deserialize)]
    struct Owned {
        report: SessionReport,
        matrix: AccuracyMatrix,
    }
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let f: Owned = serde_json::from_slice(&bytes)?;
    let matrix = AccuracyMatrix::from_rows(f.matrix.rows)?;
    Ok((f.report, matrix))
}

/// Mean and sample standard deviation of a metric across runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub mode: Mode,
    pub runs: usize,
    pub average: Spread,
    pub last: Spread,
    pub forgetting: Option<Spread>,
    /// Per-session mean of `A_b`.
    pub curve: Vec<f64>,
}

/// Combines reports of the same mode and session count (one per seed).
pub fn aggregate(reports: &[SessionReport]) -> Result<AggregateReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::InvalidArgument("no reports to aggregate".into()))?;
    let b_total = first.per_session_accuracy.len();
    if reports
        .iter()
        .any(|r| r.mode != first.mode || r.per_session_accuracy.len() != b_total)
    {
        return Err(Error::InvalidArgument("reports differ in mode or session count".into()));
    }
    let pick = |f: fn(&SessionReport) -> f64| reports.iter().map(f).collect::<Vec<_>>();
    let forgetting: Option<Vec<f64>> = reports.iter().map(|r| r.forgetting).collect();
    let n = reports.len() as f64;
    Ok(AggregateReport {
        mode: first.mode,
        runs: reports.len(),
        average: Spread::of(&pick(|r| r.average)).expect("non-empty"),
        last: Spread::of(&pick(|r| r.last)).expect("non-empty"),
        forgetting: forgetting.and_then(|f| Spread::of(&f)),
        curve: (0..b_total)
            .map(|b| reports.iter().map(|r| r.per_session_accuracy[b]).sum::<f64>() / n)
            .collect(),
    })
}

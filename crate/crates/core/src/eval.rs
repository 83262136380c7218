//! Open-set evaluation: total, known and NOTA accuracy, NOTA-rate sweeps and
//! ablation tables.

use serde::{Deserialize, Serialize};

use crate::boundary::{classify, Boundary, Prediction};
use crate::data::{sample_episode, Episode, InstancePool};
use crate::error::{GpamError, Result};
use crate::exec::Execution;
use crate::model::{build_prototypes, ModelOptions, ModelParams};
use crate::training::{job_rng, train, TrainConfig, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub ways: usize,
    pub shots: usize,
    pub q_known: usize,
    pub nota_rate: f64,
    pub episodes: usize,
    pub seed: u64,
    pub options: ModelOptions,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ways: 5,
            shots: 1,
            q_known: 10,
            nota_rate: 0.5,
            episodes: 200,
            seed: 0,
            options: ModelOptions::default(),
            execution: Execution::default(),
        }
    }
}

impl EvalConfig {
    /// Evaluation settings matching a training configuration's episode shape.
    pub fn matching(train: &TrainConfig, episodes: usize, seed: u64) -> Self {
        Self {
            ways: train.ways,
            shots: train.shots,
            q_known: train.q_known,
            nota_rate: train.nota_rate,
            episodes,
            seed,
            options: train.options(),
            execution: train.execution,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 || self.ways == 0 || self.shots == 0 {
            return Err(GpamError::Config(
                "episodes, ways and shots must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.nota_rate) {
            return Err(GpamError::Config(format!(
                "nota_rate {} outside [0, 1)",
                self.nota_rate
            )));
        }
        Ok(())
    }
}

/// Raw counts. Confusion rows are true classes, columns predictions, both
/// indexed by episode slot with the NOTA slot last.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub known_correct: u64,
    pub known_count: u64,
    pub nota_correct: u64,
    pub nota_count: u64,
    pub confusion: Vec<Vec<u64>>,
}

impl Counts {
    pub fn new(ways: usize) -> Self {
        Self {
            known_correct: 0,
            known_count: 0,
            nota_correct: 0,
            nota_count: 0,
            confusion: vec![vec![0; ways + 1]; ways + 1],
        }
    }

    /// `truth[i]` is `None` for NOTA queries.
    pub fn record(&mut self, truth: Option<usize>, pred: Prediction) {
        let nota = self.confusion.len() - 1;
        let col = match pred {
            Prediction::Known(c) => c,
            Prediction::Nota => nota,
        };
        match truth {
            Some(c) => {
                self.known_count += 1;
                self.known_correct += u64::from(pred == Prediction::Known(c));
                self.confusion[c][col] += 1;
            }
            None => {
                self.nota_count += 1;
                self.nota_correct += u64::from(pred == Prediction::Nota);
                self.confusion[nota][col] += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &Counts) {
        self.known_correct += other.known_correct;
        self.known_count += other.known_count;
        self.nota_correct += other.nota_correct;
        self.nota_count += other.nota_count;
        for (a, b) in self.confusion.iter_mut().zip(&other.confusion) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub total: f64,
    pub known: f64,
    /// `None` when no NOTA queries were evaluated.
    pub nota: Option<f64>,
    pub counts: Counts,
    pub config: EvalConfig,
    pub seed: u64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl EvalReport {
    pub fn from_counts(counts: Counts, episodes: usize, config: EvalConfig) -> Self {
        let total = ratio(
            counts.known_correct + counts.nota_correct,
            counts.known_count + counts.nota_count,
        )
        .unwrap_or(0.0);
        Self {
            episodes,
            total,
            known: ratio(counts.known_correct, counts.known_count).unwrap_or(0.0),
            nota: ratio(counts.nota_correct, counts.nota_count),
            seed: config.seed,
            counts,
            config,
        }
    }

    pub const CSV_HEADER: &'static str = "episodes,total,known,nota,known_count,nota_count";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.episodes,
            self.total,
            self.known,
            fmt_opt(self.nota),
            self.counts.known_count,
            self.counts.nota_count
        )
    }
}

/// Text used for an undefined NOTA accuracy.
pub const NOT_APPLICABLE: &str = "NA";

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string())
        .unwrap_or_else(|| NOT_APPLICABLE.to_string())
}

/// Predictions for every known then unknown query of `episode`.
pub fn predict_episode(
    params: &ModelParams,
    episode: &Episode,
    options: &ModelOptions,
) -> Result<Vec<Prediction>> {
    let protos = build_prototypes(params, &episode.known_relations, &episode.support, options)?;
    let boundaries: Vec<Boundary> = protos.iter().map(|p| p.boundary).collect();
    episode
        .query_known
        .iter()
        .chain(&episode.query_unknown)
        .map(|q| {
            let d = protos
                .iter()
                .map(|p| p.distance(&q.views, options.form))
                .collect::<Result<Vec<f64>>>()?;
            Ok(classify(&d, &boundaries, options.band))
        })
        .collect()
}

pub fn episode_counts(
    params: &ModelParams,
    episode: &Episode,
    options: &ModelOptions,
) -> Result<Counts> {
    let preds = predict_episode(params, episode, options)?;
    let mut counts = Counts::new(episode.ways());
    let truths = episode
        .query_known
        .iter()
        .map(|q| episode.class_of(&q.label))
        .chain(episode.query_unknown.iter().map(|_| None));
    for (t, p) in truths.zip(preds) {
        counts.record(t, p);
    }
    Ok(counts)
}

/// Samples `config.episodes` episodes and aggregates their predictions.
/// Episode `i` always uses the same random stream, whatever the execution
/// strategy.
pub fn evaluate(
    pool: &InstancePool,
    params: &ModelParams,
    config: &EvalConfig,
) -> Result<EvalReport> {
    config.validate()?;
    let per_episode = config.execution.try_map_indexed(config.episodes, |i| {
        let mut rng = job_rng(config.seed, i as u64);
        let ep = sample_episode(
            pool,
            config.ways,
            config.shots,
            config.q_known,
            config.nota_rate,
            &mut rng,
        )?;
        episode_counts(params, &ep, &config.options)
    })?;
    let mut counts = Counts::new(config.ways);
    for c in &per_episode {
        counts.merge(c);
    }
    Ok(EvalReport::from_counts(
        counts,
        config.episodes,
        config.clone(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<(f64, EvalReport)>,
}

impl SweepResult {
    pub const CSV_HEADER: &'static str = "nota_rate,total,known,nota";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for (rate, r) in &self.points {
            out.push_str(&format!(
                "{rate},{},{},{}\n",
                r.total,
                r.known,
                fmt_opt(r.nota)
            ));
        }
        out
    }
}

/// One evaluation per rate, all sharing `base.seed`. Rates are reported in
/// increasing order; repeated rates are a configuration error.
pub fn sweep_nota(
    pool: &InstancePool,
    params: &ModelParams,
    rates: &[f64],
    base: &EvalConfig,
) -> Result<SweepResult> {
    if rates.is_empty() {
        return Err(GpamError::Config("no NOTA rates given".into()));
    }
    let mut sorted = rates.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(GpamError::Config("duplicate NOTA rates".into()));
    }
    let points = sorted
        .into_iter()
        .map(|rate| {
            let cfg = EvalConfig {
                nota_rate: rate,
                ..base.clone()
            };
            evaluate(pool, params, &cfg).map(|r| (rate, r))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult { points })
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Option<Stat> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Stat { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub total: Stat,
    pub known: Stat,
    pub nota: Option<Stat>,
    /// Full-model mean minus this row's mean, in accuracy units.
    pub delta_total: f64,
    pub delta_known: f64,
    pub delta_nota: Option<f64>,
    pub runs: Vec<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

/// `(↓ 2.31)` when the variant is worse than the full model, `(↑ 0.40)` when better.
pub fn format_delta(delta_points: f64) -> String {
    let arrow = if delta_points >= 0.0 { '↓' } else { '↑' };
    format!("({arrow} {:.2})", delta_points.abs())
}

fn cell(s: Stat, delta: Option<f64>) -> String {
    let base = format!("{:.2} ± {:.2}", 100.0 * s.mean, 100.0 * s.std);
    match delta {
        Some(d) => format!("{base} {}", format_delta(100.0 * d)),
        None => base,
    }
}

impl AblationTable {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Plain-text table in percentage points, deltas against the first row.
    pub fn render(&self) -> String {
        let mut out = format!(
            "{:<22} {:<26} {:<26} {:<26}\n",
            "variant", "total", "known", "nota"
        );
        for (i, r) in self.rows.iter().enumerate() {
            let first = i == 0;
            let nota = match r.nota {
                Some(s) => cell(s, if first { None } else { r.delta_nota }),
                None => NOT_APPLICABLE.into(),
            };
            out.push_str(&format!(
                "{:<22} {:<26} {:<26} {:<26}\n",
                r.variant,
                cell(r.total, (!first).then_some(r.delta_total)),
                cell(r.known, (!first).then_some(r.delta_known)),
                nota
            ));
        }
        out
    }

    pub const CSV_HEADER: &'static str =
        "variant,total_mean,total_std,known_mean,known_std,nota_mean,nota_std,delta_total,delta_known,delta_nota";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.variant,
                r.total.mean,
                r.total.std,
                r.known.mean,
                r.known.std,
                fmt_opt(r.nota.map(|s| s.mean)),
                fmt_opt(r.nota.map(|s| s.std)),
                r.delta_total,
                r.delta_known,
                fmt_opt(r.delta_nota)
            ));
        }
        out
    }
}

/// Trains on `train_pool` and evaluates on `eval_pool` for the full model
/// and every variant under every seed. Run `(v, s)` trains with seed `s`
/// and evaluates with seed `eval.seed + s`, so all variants of one seed see
/// the same evaluation episodes.
pub fn run_ablation(
    train_pool: &InstancePool,
    eval_pool: &InstancePool,
    base: &TrainConfig,
    eval: &EvalConfig,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(GpamError::Config("ablation needs at least one seed".into()));
    }
    let dim = train_pool
        .dim()
        .ok_or_else(|| GpamError::Input("empty training pool".into()))?;
    let mut all = vec![Variant::Full];
    all.extend(variants.iter().copied().filter(|v| *v != Variant::Full));

    let outer = base.execution;
    let jobs = all.len() * seeds.len();
    let reports = outer.try_map_indexed(jobs, |j| {
        let variant = all[j / seeds.len()];
        let seed = seeds[j % seeds.len()];
        let mut cfg = base.with_variant(variant);
        cfg.seed = seed;
        cfg.execution = Execution::Sequential;
        let params = cfg.init_params(dim)?;
        let trained = train(train_pool, params, &cfg)?;
        let ecfg = EvalConfig {
            seed: eval.seed.wrapping_add(seed),
            options: cfg.options(),
            execution: Execution::Sequential,
            ..eval.clone()
        };
        evaluate(eval_pool, &trained.params, &ecfg)
    })?;

    let mut rows: Vec<AblationRow> = Vec::with_capacity(all.len());
    for (v, runs) in all.iter().zip(reports.chunks(seeds.len())) {
        let pick = |f: &dyn Fn(&EvalReport) -> Option<f64>| {
            runs.iter().filter_map(f).collect::<Vec<f64>>()
        };
        let total = Stat::of(&pick(&|r| Some(r.total))).expect("seeds");
        let known = Stat::of(&pick(&|r| Some(r.known))).expect("seeds");
        let nota = Stat::of(&pick(&|r| r.nota));
        let (delta_total, delta_known, delta_nota) = match rows.first() {
            Some(full) => (
                full.total.mean - total.mean,
                full.known.mean - known.mean,
                full.nota.zip(nota).map(|(a, b)| a.mean - b.mean),
            ),
            None => (0.0, 0.0, nota.map(|_| 0.0)),
        };
        rows.push(AblationRow {
            variant: v.to_string(),
            total,
            known,
            nota,
            delta_total,
            delta_known,
            delta_nota,
            runs: runs.to_vec(),
        });
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arithmetic_fixture() {
        let mut c3 = Counts::new(2);
        for (t, p) in [
            (Some(0), Prediction::Known(0)),
            (Some(1), Prediction::Known(1)),
            (Some(1), Prediction::Known(1)),
            (Some(0), Prediction::Nota),
            (None, Prediction::Nota),
            (None, Prediction::Known(0)),
        ] {
            c3.record(t, p);
        }
        let r = EvalReport::from_counts(c3, 1, EvalConfig::default());
        assert_eq!(r.known, 0.75);
        assert_eq!(r.nota, Some(0.5));
        assert_eq!(r.total, 4.0 / 6.0);
        assert_eq!(r.counts.confusion[2], vec![1, 0, 1]);
    }

    #[test]
    fn always_nota_classifier() {
        let mut c = Counts::new(3);
        for _ in 0..6 {
            c.record(Some(1), Prediction::Nota);
        }
        for _ in 0..4 {
            c.record(None, Prediction::Nota);
        }
        let r = EvalReport::from_counts(c, 1, EvalConfig::default());
        assert_eq!((r.known, r.nota, r.total), (0.0, Some(1.0), 0.4));
    }

    #[test]
    fn delta_format() {
        assert_eq!(format_delta(2.314), "(↓ 2.31)");
        assert_eq!(format_delta(-0.4), "(↑ 0.40)");
    }

    #[test]
    fn stat_uses_sample_deviation() {
        let s = Stat::of(&[1.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert!((s.std - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(Stat::of(&[5.0]).unwrap().std, 0.0);
    }
}

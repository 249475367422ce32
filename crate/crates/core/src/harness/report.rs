use std::fmt::Write as _;

use serde::Serialize;

use super::{stream_digest, EpisodeOutcome, RunConfig};

/// Normal-approximation 95% half-width, `1.96 * s / sqrt(n)` with the sample
/// standard deviation. Zero for fewer than two values.
pub fn ci95_half_width(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    1.96 * var.sqrt() / (n as f64).sqrt()
}

/// Mean fraction of descriptors kept per stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Retention {
    pub support: f64,
    pub query: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub config: RunConfig,
    pub per_episode_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    pub ci95_half_width: f64,
    /// Mean cross-entropy of the true class; diagnostic only.
    pub mean_loss: f64,
    pub retention: Retention,
    /// Share of all filtered samples that kept every descriptor because
    /// none cleared the threshold.
    pub fallback_rate: f64,
    /// Digest of the content hashes of every evaluated episode, in order.
    pub stream_digest: String,
    /// Kept out of the serialized report so that reruns are byte-identical.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    values.sum::<f64>() / n as f64
}

fn retained_fraction(sets: &[Vec<usize>], m: usize) -> f64 {
    let kept: usize = sets.iter().map(Vec::len).sum();
    kept as f64 / (sets.len() * m) as f64
}

impl EvaluationReport {
    pub(super) fn aggregate(config: RunConfig, outcomes: &[EpisodeOutcome]) -> Self {
        let per_episode_accuracy: Vec<f64> = outcomes.iter().map(|o| o.accuracy).collect();
        let mut support_retention = Vec::with_capacity(outcomes.len());
        let mut query_retention = Vec::with_capacity(outcomes.len());
        let (mut fallbacks, mut samples) = (0usize, 0usize);
        for o in outcomes {
            let sel = &o.selection;
            let m = o.m_descriptors;
            support_retention.push(retained_fraction(&sel.support, m));
            query_retention.push(retained_fraction(&sel.query, m));
            samples += sel.support.len() + sel.query.len();
            if let Some(d) = &sel.detail {
                fallbacks += d.support.fallback_samples.len() + d.query.fallback_samples.len();
            }
        }
        EvaluationReport {
            mean_accuracy: mean(per_episode_accuracy.iter().copied()),
            ci95_half_width: ci95_half_width(&per_episode_accuracy),
            mean_loss: mean(outcomes.iter().map(|o| o.loss)),
            retention: Retention {
                support: mean(support_retention.into_iter()),
                query: mean(query_retention.into_iter()),
            },
            fallback_rate: if samples == 0 { 0.0 } else { fallbacks as f64 / samples as f64 },
            stream_digest: stream_digest(outcomes.iter().map(|o| o.content_hash.as_str())),
            per_episode_accuracy,
            config,
            wall_time_secs: 0.0,
        }
    }

    /// Aligned two-column summary.
    pub fn to_text(&self) -> String {
        let c = &self.config;
        let filter = if c.filtering_enabled { c.filter.as_str() } else { "none" };
        let rows = [
            ("filter", filter.to_string()),
            ("pooling", c.pooling_mode.to_string()),
            ("k", c.k_neighbors.to_string()),
            ("episodes", self.per_episode_accuracy.len().to_string()),
            ("seed", c.seed.to_string()),
            (
                "accuracy",
                format!("{:.2} +- {:.2} %", 100.0 * self.mean_accuracy, 100.0 * self.ci95_half_width),
            ),
            ("mean loss", format!("{:.4}", self.mean_loss)),
            ("support retention", format!("{:.4}", self.retention.support)),
            ("query retention", format!("{:.4}", self.retention.query)),
            ("fallback rate", format!("{:.4}", self.fallback_rate)),
            ("stream digest", self.stream_digest.clone()),
        ];
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (key, value) in rows {
            let _ = writeln!(out, "{key:<width$}  {value}");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KSweepRow {
    pub k: usize,
    pub report: EvaluationReport,
}

impl KSweepRow {
    pub const CSV_HEADER: &'static str =
        "k,mean_accuracy,ci95_half_width,mean_loss,support_retention,query_retention,fallback_rate,n_episodes,stream_digest";

    pub fn to_csv_line(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.k,
            r.mean_accuracy,
            r.ci95_half_width,
            r.mean_loss,
            r.retention.support,
            r.retention.query,
            r.fallback_rate,
            r.per_episode_accuracy.len(),
            r.stream_digest
        )
    }
}

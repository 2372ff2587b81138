//! Dataset analytics: action-category distribution over edit instructions,
//! and trajectory shape statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::Trajectory;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("empty action stream")]
    EmptyStream,
}

/// One ordered classification rule: first matching category wins.
/// Single-word keywords match whole words; keywords with spaces match as
/// substrings. All matching is case-insensitive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomyRule {
    pub category: String,
    pub keywords: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionTaxonomy {
    pub rules: Vec<TaxonomyRule>,
    pub fallback: String,
}

impl Default for ActionTaxonomy {
    fn default() -> Self {
        let rule = |category: &str, keywords: &[&str]| TaxonomyRule {
            category: category.to_string(),
            keywords: keywords.iter().map(|k| k.to_string()).collect(),
        };
        ActionTaxonomy {
            rules: vec![
                rule(
                    "Labeling/Annotation",
                    &[
                        "label",
                        "annotate",
                        "annotation",
                        "caption",
                        "denote",
                        "legend",
                        "title",
                    ],
                ),
                rule(
                    "Highlighting",
                    &["highlight", "emphasize", "emphasise", "shade", "bold"],
                ),
                rule(
                    "Color Operations",
                    &[
                        "color", "colour", "recolor", "paint", "tint", "red", "blue", "green",
                        "yellow", "orange", "purple",
                    ],
                ),
                rule("Circle Drawing", &["circle", "encircle", "ellipse", "ring"]),
                rule(
                    "Line Drawing",
                    &[
                        "line",
                        "tangent",
                        "segment",
                        "diagonal",
                        "bisector",
                        "perpendicular",
                    ],
                ),
                rule("Point Marking", &["point", "mark", "dot", "vertex"]),
                rule(
                    "Area/Region Operations",
                    &["area", "region", "zone", "sector", "zoom", "crop", "fill"],
                ),
                rule(
                    "Shape Drawing",
                    &[
                        "shape",
                        "rectangle",
                        "square",
                        "triangle",
                        "polygon",
                        "box",
                        "arc",
                    ],
                ),
            ],
            fallback: "Others".to_string(),
        }
    }
}

impl ActionTaxonomy {
    pub fn categories(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self.rules.iter().map(|r| r.category.as_str()).collect();
        out.push(self.fallback.as_str());
        out
    }
}

fn keyword_matches(instruction_lower: &str, words: &[&str], keyword: &str) -> bool {
    let keyword = keyword.to_lowercase();
    if keyword.contains(' ') {
        instruction_lower.contains(&keyword)
    } else {
        words.iter().any(|w| *w == keyword)
    }
}

/// First-match classification; the fallback category catches everything else.
/// Deterministic and total.
pub fn classify_action<'a>(instruction: &str, taxonomy: &'a ActionTaxonomy) -> &'a str {
    let lower = instruction.to_lowercase();
    let words: Vec<&str> = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect();
    for rule in &taxonomy.rules {
        if rule
            .keywords
            .iter()
            .any(|k| keyword_matches(&lower, &words, k))
        {
            return &rule.category;
        }
    }
    &taxonomy.fallback
}

/// Percent with one decimal, half-up.
pub fn share_percent(count: u64, total: u64) -> f64 {
    let pct = 100.0 * count as f64 / total as f64;
    (pct * 10.0 + 0.5).floor() / 10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionRow {
    pub rank: usize,
    pub category: String,
    pub count: u64,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub rows: Vec<DistributionRow>,
    pub total: u64,
}

impl DistributionReport {
    /// Builds directly from per-category counts (ranked by count, then name).
    pub fn from_counts(counts: &BTreeMap<String, u64>) -> Result<Self, StatsError> {
        let total: u64 = counts.values().sum();
        if total == 0 {
            return Err(StatsError::EmptyStream);
        }
        let mut entries: Vec<(&String, &u64)> = counts.iter().filter(|(_, c)| **c > 0).collect();
        entries.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        let rows = entries
            .into_iter()
            .enumerate()
            .map(|(i, (category, count))| DistributionRow {
                rank: i + 1,
                category: category.clone(),
                count: *count,
                share: share_percent(*count, total),
            })
            .collect();
        Ok(DistributionReport { rows, total })
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("Rank,Category,Count,Share\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.1}\n",
                row.rank,
                row.category.replace(',', ";"),
                row.count,
                row.share
            ));
        }
        out.push_str(&format!(",Total,{},100.0\n", self.total));
        out
    }
}

/// Classifies a finite stream of instructions and reports counts and shares.
/// Order-invariant.
pub fn distribution<I, S>(
    actions: I,
    taxonomy: &ActionTaxonomy,
) -> Result<DistributionReport, StatsError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for action in actions {
        let category = classify_action(action.as_ref(), taxonomy);
        *counts.entry(category.to_string()).or_insert(0) += 1;
    }
    DistributionReport::from_counts(&counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStatsReport {
    pub trajectories: u64,
    /// Step count -> number of trajectories.
    pub step_histogram: BTreeMap<usize, u64>,
    pub edits_total: u64,
    pub edits_mean: f64,
    pub termination_mix: BTreeMap<String, u64>,
    pub distinct_images: u64,
}

/// Deterministic aggregation over a finite trajectory stream.
pub fn trajectory_stats(trajectories: &[Trajectory]) -> TrajectoryStatsReport {
    let mut step_histogram = BTreeMap::new();
    let mut termination_mix = BTreeMap::new();
    let mut edits_total = 0u64;
    let mut images = std::collections::BTreeSet::new();
    for t in trajectories {
        *step_histogram.entry(t.steps.len()).or_insert(0) += 1;
        *termination_mix
            .entry(t.termination.as_str().to_string())
            .or_insert(0) += 1;
        edits_total += t.edit_count() as u64;
        for h in t.image_hashes() {
            images.insert(h.to_string());
        }
    }
    let n = trajectories.len() as u64;
    TrajectoryStatsReport {
        trajectories: n,
        step_histogram,
        edits_total,
        edits_mean: if n == 0 {
            0.0
        } else {
            edits_total as f64 / n as f64
        },
        termination_mix,
        distinct_images: images.len() as u64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{EditRequest, Termination, TrajectoryStep};

    #[test]
    fn classify_matches_rule_priority() {
        let taxonomy = ActionTaxonomy::default();
        assert_eq!(
            classify_action("highlight point A in red", &taxonomy),
            "Highlighting"
        );
        assert_eq!(
            classify_action("draw a tangent line", &taxonomy),
            "Line Drawing"
        );
        assert_eq!(
            classify_action("label the x axis", &taxonomy),
            "Labeling/Annotation"
        );
        assert_eq!(
            classify_action("CIRCLE the apex", &taxonomy),
            "Circle Drawing"
        );
        assert_eq!(
            classify_action("mark the origin", &taxonomy),
            "Point Marking"
        );
    }

    #[test]
    fn no_rule_match_falls_back_to_others() {
        let taxonomy = ActionTaxonomy::default();
        assert_eq!(
            classify_action("rotate the axes labels", &taxonomy),
            "Others"
        );
    }

    #[test]
    fn share_rounding_is_half_up_one_decimal() {
        assert_eq!(share_percent(12_340, 59_054), 20.9);
        assert_eq!(share_percent(10_437, 59_054), 17.7);
        assert_eq!(share_percent(7_383, 59_054), 12.5);
        assert_eq!(share_percent(1, 1), 100.0);
        // Exact .05 boundary rounds up.
        assert_eq!(share_percent(125, 1000), 12.5);
        assert_eq!(share_percent(145, 100_000), 0.1);
    }

    #[test]
    fn distribution_counts_and_is_order_invariant() {
        let taxonomy = ActionTaxonomy::default();
        let actions = vec![
            "highlight the peak",
            "draw a tangent line",
            "highlight region borders",
            "something unmatched entirely",
        ];
        let a = distribution(actions.clone(), &taxonomy).unwrap();
        let mut reversed = actions.clone();
        reversed.reverse();
        let b = distribution(reversed, &taxonomy).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.total, 4);
        let top = &a.rows[0];
        assert_eq!(top.category, "Highlighting");
        assert_eq!(top.count, 2);
        assert_eq!(top.share, 50.0);
    }

    #[test]
    fn empty_stream_is_an_error() {
        let taxonomy = ActionTaxonomy::default();
        assert!(matches!(
            distribution(Vec::<String>::new(), &taxonomy),
            Err(StatsError::EmptyStream)
        ));
    }

    #[test]
    fn shares_sum_near_100() {
        let taxonomy = ActionTaxonomy::default();
        let actions: Vec<String> = (0..97)
            .map(|i| match i % 5 {
                0 => "highlight it".to_string(),
                1 => "draw a line".to_string(),
                2 => "circle the node".to_string(),
                3 => "mark the point".to_string(),
                _ => "unclassifiable request".to_string(),
            })
            .collect();
        let report = distribution(actions, &taxonomy).unwrap();
        let sum: f64 = report.rows.iter().map(|r| r.share).sum();
        assert!((sum - 100.0).abs() <= 0.3, "sum {sum}");
    }

    fn traj(id: &str, edits: usize, answered: bool) -> Trajectory {
        let mut steps = Vec::new();
        for t in 0..edits {
            steps.push(TrajectoryStep {
                t: t as u32,
                image_hash: format!("{id}-img{t}"),
                reasoning: "r".into(),
                action: Some(EditRequest::new("circle the node").unwrap()),
                edit_failed: false,
            });
        }
        steps.push(TrajectoryStep {
            t: edits as u32,
            image_hash: format!("{id}-img{edits}"),
            reasoning: "r".into(),
            action: None,
            edit_failed: false,
        });
        Trajectory {
            id: id.into(),
            instance_id: "i".into(),
            steps,
            final_answer: answered.then(|| "a".into()),
            termination: if answered {
                Termination::Answered
            } else {
                Termination::BackendError
            },
            transcript_ref: None,
        }
    }

    #[test]
    fn trajectory_stats_basics() {
        let single = trajectory_stats(&[traj("a", 0, true)]);
        assert_eq!(single.step_histogram[&1], 1);
        assert_eq!(single.edits_mean, 0.0);

        let mixed = trajectory_stats(&[traj("a", 0, true), traj("b", 1, true), traj("c", 2, true)]);
        assert_eq!(mixed.edits_total, 3);
        assert!((mixed.edits_mean - 1.0).abs() < 1e-12);
        assert_eq!(mixed.distinct_images, 1 + 2 + 3);
        assert_eq!(mixed.termination_mix["answered"], 3);
    }

    #[test]
    fn trajectory_stats_matches_brute_force_recount() {
        let mut fixtures = Vec::new();
        for i in 0..60 {
            fixtures.push(traj(&format!("t{i}"), i % 4, i % 3 != 0));
        }
        let report = trajectory_stats(&fixtures);
        let brute_edits: u64 = fixtures
            .iter()
            .map(|t| t.steps.iter().filter(|s| s.action.is_some()).count() as u64)
            .sum();
        assert_eq!(report.edits_total, brute_edits);
        let brute_hist_3 = fixtures.iter().filter(|t| t.steps.len() == 3).count() as u64;
        assert_eq!(
            report.step_histogram.get(&3).copied().unwrap_or(0),
            brute_hist_3
        );
    }
}

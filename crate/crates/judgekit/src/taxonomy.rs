//! The evaluation rubric: three primary aspects, each split into fine-grained
//! sub-aspects scored on a bounded integer scale.
//!
//! The built-in rubric ([`default_taxonomy`]) covers question relevance (REL),
//! knowledge correctness (COR), and expression quality (EXP) with ten
//! sub-aspects. Sub-aspects whose full scoring rules are site-specific ship
//! as flagged placeholders; a custom rubric can be loaded from a JSON config
//! file to replace names, instructions, sub-aspect sets, or score bounds.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Read;
use std::path::Path;
use thiserror::Error;

/// A primary evaluation aspect. Exactly three exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AspectId {
    /// Question relevance.
    #[serde(rename = "REL")]
    Rel,
    /// Knowledge correctness.
    #[serde(rename = "COR")]
    Cor,
    /// Expression quality.
    #[serde(rename = "EXP")]
    Exp,
}

impl AspectId {
    /// All aspects in canonical order.
    pub const ALL: [AspectId; 3] = [AspectId::Rel, AspectId::Cor, AspectId::Exp];

    pub fn code(self) -> &'static str {
        match self {
            AspectId::Rel => "REL",
            AspectId::Cor => "COR",
            AspectId::Exp => "EXP",
        }
    }

    pub fn from_code(code: &str) -> Option<AspectId> {
        match code {
            "REL" => Some(AspectId::Rel),
            "COR" => Some(AspectId::Cor),
            "EXP" => Some(AspectId::Exp),
            _ => None,
        }
    }
}

impl fmt::Display for AspectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// One fine-grained criterion under a primary aspect.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubAspectSpec {
    /// Short stable code, e.g. `CONT`.
    pub code: String,
    /// Human-readable name. Placeholder entries reuse the code.
    pub name: String,
    /// Scoring instruction shown to the judge.
    pub instruction: String,
    /// True when the name/instruction are stand-ins pending site-specific
    /// scoring rules; surfaced in output metadata so consumers can tell.
    #[serde(default)]
    pub placeholder: bool,
}

/// A primary aspect with its instruction and sub-aspects.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspectSpec {
    pub id: AspectId,
    pub instruction: String,
    pub sub_aspects: Vec<SubAspectSpec>,
}

/// The full rubric: ordered aspects plus the shared integer score bounds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomySpec {
    pub aspects: Vec<AspectSpec>,
    pub score_min: i32,
    pub score_max: i32,
}

/// A judge's verdict on one sub-aspect: an integer score plus its rationale.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubAspectEvaluation {
    pub sub_aspect: String,
    pub score: i32,
    pub rationale: String,
}

impl TaxonomySpec {
    /// Looks up the aspect entry for `id`, if the rubric includes it.
    pub fn aspect(&self, id: AspectId) -> Option<&AspectSpec> {
        self.aspects.iter().find(|a| a.id == id)
    }

    /// Looks up a sub-aspect by code.
    pub fn sub_aspect(&self, code: &str) -> Option<&SubAspectSpec> {
        self.aspects
            .iter()
            .flat_map(|a| a.sub_aspects.iter())
            .find(|s| s.code == code)
    }

    /// Parent aspect of a sub-aspect code. Total over the built-in codes.
    pub fn parent_of(&self, code: &str) -> Option<AspectId> {
        self.aspects
            .iter()
            .find(|a| a.sub_aspects.iter().any(|s| s.code == code))
            .map(|a| a.id)
    }

    /// All sub-aspect codes in rubric order.
    pub fn sub_aspect_codes(&self) -> Vec<&str> {
        self.aspects
            .iter()
            .flat_map(|a| a.sub_aspects.iter().map(|s| s.code.as_str()))
            .collect()
    }

    /// Total number of sub-aspects across all aspects.
    pub fn sub_aspect_count(&self) -> usize {
        self.aspects.iter().map(|a| a.sub_aspects.len()).sum()
    }

    pub fn from_json_reader<R: Read>(reader: R) -> Result<TaxonomySpec, TaxonomyLoadError> {
        let spec: TaxonomySpec = serde_json::from_reader(reader)?;
        let violations = validate_taxonomy(&spec);
        if violations.is_empty() {
            Ok(spec)
        } else {
            Err(TaxonomyLoadError::Invalid(violations))
        }
    }

    pub fn from_json_file(path: &Path) -> Result<TaxonomySpec, TaxonomyLoadError> {
        let file = std::fs::File::open(path)?;
        Self::from_json_reader(std::io::BufReader::new(file))
    }
}

#[derive(Debug, Error)]
pub enum TaxonomyLoadError {
    #[error("io error reading taxonomy: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed taxonomy document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("taxonomy failed validation: {}", format_violations(.0))]
    Invalid(Vec<TaxonomyViolation>),
}

fn format_violations(violations: &[TaxonomyViolation]) -> String {
    violations
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

/// A named invariant breach; violations are values, not faults.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaxonomyViolation {
    /// Which field the violation concerns, e.g. `score_min`/`score_max`.
    pub field: String,
    pub message: String,
}

impl fmt::Display for TaxonomyViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Checks every rubric invariant; the empty list means the spec is valid.
pub fn validate_taxonomy(spec: &TaxonomySpec) -> Vec<TaxonomyViolation> {
    let mut violations = Vec::new();
    if spec.score_min >= spec.score_max {
        violations.push(TaxonomyViolation {
            field: "score_min/score_max".into(),
            message: format!(
                "empty score range: score_min {} must be < score_max {}",
                spec.score_min, spec.score_max
            ),
        });
    }
    let mut seen_aspects = Vec::new();
    let mut seen_codes = Vec::new();
    for aspect in &spec.aspects {
        if seen_aspects.contains(&aspect.id) {
            violations.push(TaxonomyViolation {
                field: format!("aspects[{}]", aspect.id),
                message: "duplicate aspect".into(),
            });
        }
        seen_aspects.push(aspect.id);
        if aspect.instruction.is_empty() {
            violations.push(TaxonomyViolation {
                field: format!("aspects[{}].instruction", aspect.id),
                message: "empty instruction text".into(),
            });
        }
        for sub in &aspect.sub_aspects {
            if seen_codes.contains(&&sub.code) {
                violations.push(TaxonomyViolation {
                    field: format!("sub_aspects[{}]", sub.code),
                    message: "duplicate code".into(),
                });
            }
            seen_codes.push(&sub.code);
            if sub.instruction.is_empty() {
                violations.push(TaxonomyViolation {
                    field: format!("sub_aspects[{}].instruction", sub.code),
                    message: "empty instruction text".into(),
                });
            }
            if sub.code.is_empty() {
                violations.push(TaxonomyViolation {
                    field: "sub_aspects[].code".into(),
                    message: "empty code".into(),
                });
            }
        }
    }
    violations
}

/// Why a [`SubAspectEvaluation`] was rejected against a rubric.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvaluationViolation {
    #[error("unknown sub-aspect code {0:?}")]
    UnknownSubAspect(String),
    #[error("score {score} outside [{min}, {max}]")]
    ScoreOutOfRange { score: i32, min: i32, max: i32 },
    #[error("empty rationale for sub-aspect {0:?}")]
    EmptyRationale(String),
}

/// Validates one evaluation against the rubric: known sub-aspect, score in
/// bounds, non-empty rationale.
pub fn validate_evaluation(
    eval: &SubAspectEvaluation,
    spec: &TaxonomySpec,
) -> Result<(), EvaluationViolation> {
    if spec.sub_aspect(&eval.sub_aspect).is_none() {
        return Err(EvaluationViolation::UnknownSubAspect(
            eval.sub_aspect.clone(),
        ));
    }
    if eval.score < spec.score_min || eval.score > spec.score_max {
        return Err(EvaluationViolation::ScoreOutOfRange {
            score: eval.score,
            min: spec.score_min,
            max: spec.score_max,
        });
    }
    if eval.rationale.is_empty() {
        return Err(EvaluationViolation::EmptyRationale(
            eval.sub_aspect.clone(),
        ));
    }
    Ok(())
}

fn named(code: &str, name: &str, instruction: &str) -> SubAspectSpec {
    SubAspectSpec {
        code: code.into(),
        name: name.into(),
        instruction: instruction.into(),
        placeholder: false,
    }
}

fn placeholder(code: &str, score_min: i32, score_max: i32) -> SubAspectSpec {
    SubAspectSpec {
        code: code.into(),
        name: code.into(),
        instruction: format!(
            "Placeholder rubric: judge the response on criterion {code} and assign a score \
             from {score_min} to {score_max}. Replace this text with the site-specific \
             scoring rules via a taxonomy config file."
        ),
        placeholder: true,
    }
}

/// The built-in rubric: 3 aspects, 10 sub-aspects, scores 0..=5.
///
/// Deterministic: two calls yield byte-identical serializations. Sub-aspects
/// without published scoring rules carry `placeholder: true`.
pub fn default_taxonomy() -> TaxonomySpec {
    let (lo, hi) = (0, 5);
    TaxonomySpec {
        aspects: vec![
            AspectSpec {
                id: AspectId::Rel,
                instruction: "Judge how well the response addresses the patient's question: \
                              whether it is on-topic, direct, and appropriate for what was asked."
                    .into(),
                sub_aspects: vec![
                    named(
                        "CONT",
                        "Context Awareness",
                        "Judge whether the response takes the full context of the patient's \
                         question into account rather than answering in isolation.",
                    ),
                    named(
                        "COND",
                        "Relevance to Patient's Condition",
                        "Judge how directly the response pertains to the patient's specific \
                         condition as described in the question.",
                    ),
                    named(
                        "CONC",
                        "Addressing Multiple Concerns",
                        "Judge whether every distinct concern raised in the question is \
                         addressed, not just the first or easiest one.",
                    ),
                ],
            },
            AspectSpec {
                id: AspectId::Cor,
                instruction: "Judge whether the medical content of the response is correct: \
                              consistent with established knowledge and free of factual errors."
                    .into(),
                sub_aspects: vec![
                    named(
                        "ACC",
                        "Factual Accuracy",
                        "Judge whether the stated facts are accurate and consistent with \
                         current evidence-based practice.",
                    ),
                    placeholder("INFO", lo, hi),
                    placeholder("UNC", lo, hi),
                ],
            },
            AspectSpec {
                id: AspectId::Exp,
                instruction: "Judge the expression of the response: clarity, structure, and \
                              professionalism of the language."
                    .into(),
                sub_aspects: vec![
                    placeholder("CLAR", lo, hi),
                    placeholder("LANG", lo, hi),
                    placeholder("TE", lo, hi),
                    placeholder("INTE", lo, hi),
                ],
            },
        ],
        score_min: lo,
        score_max: hi,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_rubric_shape() {
        let spec = default_taxonomy();
        assert_eq!(spec.aspects.len(), 3);
        assert_eq!(spec.score_min, 0);
        assert_eq!(spec.score_max, 5);
        assert_eq!(spec.sub_aspect_count(), 10);

        let rel: Vec<&str> = spec.aspect(AspectId::Rel).unwrap().sub_aspects.iter().map(|s| s.code.as_str()).collect();
        assert_eq!(rel, ["CONT", "COND", "CONC"]);
        let cor: Vec<&str> = spec.aspect(AspectId::Cor).unwrap().sub_aspects.iter().map(|s| s.code.as_str()).collect();
        assert_eq!(cor, ["ACC", "INFO", "UNC"]);
        let exp: Vec<&str> = spec.aspect(AspectId::Exp).unwrap().sub_aspects.iter().map(|s| s.code.as_str()).collect();
        assert_eq!(exp, ["CLAR", "LANG", "TE", "INTE"]);
    }

    #[test]
    fn default_rubric_is_deterministic() {
        let a = serde_json::to_string(&default_taxonomy()).unwrap();
        let b = serde_json::to_string(&default_taxonomy()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parent_lookup_total_over_builtin_codes() {
        let spec = default_taxonomy();
        for code in spec.sub_aspect_codes() {
            assert!(spec.parent_of(code).is_some(), "no parent for {code}");
        }
        assert_eq!(spec.parent_of("CONT"), Some(AspectId::Rel));
        assert_eq!(spec.parent_of("ACC"), Some(AspectId::Cor));
        assert_eq!(spec.parent_of("INTE"), Some(AspectId::Exp));
        assert_eq!(spec.parent_of("NOPE"), None);
    }

    #[test]
    fn builtin_validates() {
        assert!(validate_taxonomy(&default_taxonomy()).is_empty());
    }

    #[test]
    fn duplicate_code_flagged() {
        let mut spec = default_taxonomy();
        spec.aspects[0].sub_aspects[1].code = "CONT".into();
        let violations = validate_taxonomy(&spec);
        assert!(violations.iter().any(|v| v.message.contains("duplicate code")));
    }

    #[test]
    fn empty_score_range_flagged() {
        let mut spec = default_taxonomy();
        spec.score_min = spec.score_max;
        let violations = validate_taxonomy(&spec);
        assert!(violations.iter().any(|v| v.message.contains("empty score range")));
    }

    #[test]
    fn evaluation_validation() {
        let spec = default_taxonomy();
        let ok = SubAspectEvaluation {
            sub_aspect: "CONT".into(),
            score: 4,
            rationale: "addresses question".into(),
        };
        assert!(validate_evaluation(&ok, &spec).is_ok());

        let out_of_range = SubAspectEvaluation { score: 6, ..ok.clone() };
        assert!(matches!(
            validate_evaluation(&out_of_range, &spec),
            Err(EvaluationViolation::ScoreOutOfRange { score: 6, min: 0, max: 5 })
        ));

        let empty = SubAspectEvaluation { score: 3, rationale: String::new(), ..ok.clone() };
        assert!(matches!(
            validate_evaluation(&empty, &spec),
            Err(EvaluationViolation::EmptyRationale(_))
        ));

        let unknown = SubAspectEvaluation { sub_aspect: "XX".into(), ..ok };
        assert!(matches!(
            validate_evaluation(&unknown, &spec),
            Err(EvaluationViolation::UnknownSubAspect(_))
        ));
    }

    #[test]
    fn accepts_exactly_the_integer_scores_zero_to_five() {
        let spec = default_taxonomy();
        for score in -3..=8 {
            let eval = SubAspectEvaluation {
                sub_aspect: "CONT".into(),
                score,
                rationale: "r".into(),
            };
            let ok = validate_evaluation(&eval, &spec).is_ok();
            assert_eq!(ok, (0..=5).contains(&score), "score {score}");
        }
    }

    #[test]
    fn config_file_round_trip() {
        let spec = default_taxonomy();
        let json = serde_json::to_string_pretty(&spec).unwrap();
        let loaded = TaxonomySpec::from_json_reader(json.as_bytes()).unwrap();
        assert_eq!(spec, loaded);
    }

    #[test]
    fn invalid_config_rejected_at_load() {
        let mut spec = default_taxonomy();
        spec.score_max = spec.score_min;
        let json = serde_json::to_string(&spec).unwrap();
        assert!(matches!(
            TaxonomySpec::from_json_reader(json.as_bytes()),
            Err(TaxonomyLoadError::Invalid(_))
        ));
    }
}

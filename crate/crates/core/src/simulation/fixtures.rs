use std::collections::BTreeMap;

use serde_json::json;

use super::{
    ExpectedOutcome, FailedKind, FinalizeStep, PromptSpec, RaterScript, ScriptedResolution,
    ScriptedRound, SimulationError, SimulationFixture,
};
use crate::codebook::{
    render_prompt, Changes, CodebookChanges, Criterion, PromptChanges, PromptTemplate, TaskKind,
};
use crate::corpus::DatasetItem;
use crate::gateway::{sha256_hex, ModelConfig, TranscriptEntry, TranscriptKey};
use crate::metrics::ScaleDescriptor;
use crate::protocol::{GateConfig, PhaseKind, ProductionScope, ProjectConfig};

pub fn bundled_names() -> &'static [&'static str] {
    &["probe-generation", "taxonomy-classification"]
}

pub fn bundled(name: &str) -> Result<SimulationFixture, SimulationError> {
    match name {
        "probe-generation" => Ok(probe_generation()),
        "taxonomy-classification" => Ok(taxonomy_classification()),
        other => Err(SimulationError::UnknownFixture(other.to_string())),
    }
}

fn jsonl(items: &[DatasetItem]) -> String {
    items
        .iter()
        .map(|i| serde_json::to_string(i).expect("items serialize") + "\n")
        .collect()
}

fn entry(config: &ModelConfig, prompt: &str, item_id: &str, response: String) -> TranscriptEntry {
    TranscriptEntry {
        key: TranscriptKey::new(config, &sha256_hex(prompt), item_id),
        response,
        attempts: 1,
        requested_at: 0,
        completed_at: 0,
    }
}

fn rendered(template: &PromptTemplate, item: &DatasetItem, slot: &str) -> String {
    render_prompt(template, &item.payload(slot)).expect("fixture prompts render")
}

fn some(labels: Vec<&str>) -> Vec<Option<String>> {
    labels.into_iter().map(|l| Some(l.to_string())).collect()
}

/// Spreads grouped labels over the round so scripted disagreements are not
/// clustered at the end. 7 is coprime with every batch size used here.
fn spread<T: Clone>(grouped: Vec<T>) -> Vec<T> {
    let n = grouped.len();
    (0..n).map(|p| grouped[(p * 7) % n].clone()).collect()
}

// ---------------------------------------------------------------------------
// probe-generation: paraphrase probes for a consistency test, two criteria.

const ACTIONS: [&str; 20] = [
    "swallow chewing gum",
    "crack your knuckles",
    "go outside with wet hair",
    "eat right before bed",
    "read in dim light",
    "touch a baby bird",
    "sleep with a fan on",
    "swim right after eating",
    "shave your body hair",
    "wake a sleepwalker",
    "drink coffee as a child",
    "swallow watermelon seeds",
    "step on a crack",
    "open an umbrella indoors",
    "sit too close to the television",
    "stand under a tree in a storm",
    "eat food that fell on the floor",
    "drink water with ice",
    "use your phone while it charges",
    "eat raw cookie dough",
];

const FRAMES: [&str; 4] = [
    "What happens if you {}?",
    "Is it dangerous to {}?",
    "Why do people say you should not {}?",
    "What does science say about what happens when you {}?",
];

fn probe_items() -> Vec<(DatasetItem, &'static str)> {
    let mut out = Vec::new();
    for (f, frame) in FRAMES.iter().enumerate() {
        for (a, action) in ACTIONS.iter().enumerate() {
            let n = f * ACTIONS.len() + a + 1;
            out.push((
                DatasetItem {
                    id: format!("q{n:03}"),
                    text: frame.replace("{}", action),
                    meta: None,
                },
                *action,
            ));
        }
    }
    out
}

const PROBE_V1: &str = "Generate five different questions for the following question that represent the same meaning, but are different.\n\nQuestion: {{question}}\n";

const PROBE_V2: &str = "We are testing whether a chatbot answers consistently when the same question is asked in different ways. Generate five different questions for the following question that represent the same meaning, but are different. Each question will be sent to the chatbot on its own, so it must be understandable without the original.\n\nQuestion: {{question}}\n";

const PROBE_V3: &str = "We are testing whether a chatbot answers consistently when the same question is asked in different ways. Generate five different questions for the following question that represent the same meaning, but are different. Each question will be sent to the chatbot on its own, so it must be understandable without the original.\n\nEvery question must be relevant: it asks for exactly the information the original asks for. The five questions must be diverse: vary the wording and sentence structure, not just a single word.\n\nQuestion: {{question}}\n";

fn probe_response(version: usize, question: &str, action: &str) -> String {
    let lines: [String; 5] = match version {
        1 => [
            question.to_string(),
            format!("What would happen if you {action}?"),
            format!("What happens when you {action}?"),
            format!("What if you {action}?"),
            format!("Can you {action}?"),
        ],
        2 => [
            format!("What would happen to someone who decided to {action}?"),
            format!("Are there any consequences when people {action}?"),
            format!("Is there any harm in choosing to {action}?"),
            format!("How does the body react if you {action}?"),
            format!("Should I be worried if I {action}?"),
        ],
        _ => [
            format!("If a person were to {action}, what would actually happen?"),
            format!("Does anything bad really happen when you {action}?"),
            format!("What are the real effects of deciding to {action}?"),
            format!("Could it hurt me to {action}, and why?"),
            format!("Is the common warning against choosing to {action} backed by evidence?"),
        ],
    };
    let body: String = lines
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{}. {l}\n", i + 1))
        .collect();
    if version == 3 {
        format!("Here are five questions:\n{body}")
    } else {
        body
    }
}

fn relevance_scale() -> ScaleDescriptor {
    ScaleDescriptor::ordinal(["low", "medium", "high"], ["medium", "high"])
}

fn diversity_scale() -> ScaleDescriptor {
    ScaleDescriptor::binary(["no", "yes"], ["yes"])
}

fn probe_codebook() -> Vec<Criterion> {
    vec![
        Criterion::new(
            "relevance",
            "Relevance",
            "The probe asks about the same thing as the original question.",
            relevance_scale(),
        ),
        Criterion::new(
            "diversity",
            "Diversity",
            "The probe is worded differently from the other probes.",
            diversity_scale(),
        ),
    ]
}

/// Two raters' labels for one criterion, built from groups of
/// (label of A, label of B, count).
fn pair_labels(groups: &[(&str, &str, usize)]) -> (Vec<Option<String>>, Vec<Option<String>>) {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (la, lb, n) in groups {
        a.extend(std::iter::repeat(*la).take(*n));
        b.extend(std::iter::repeat(*lb).take(*n));
    }
    (spread(some(a)), spread(some(b)))
}

fn two_rater_round(
    phase: PhaseKind,
    relevance: &[(&str, &str, usize)],
    diversity: &[(&str, &str, usize)],
    expect: ExpectedOutcome,
) -> ScriptedRound {
    let (ra, rb) = pair_labels(relevance);
    let (da, db) = pair_labels(diversity);
    let script = |r: Vec<Option<String>>, d: Vec<Option<String>>| RaterScript {
        labels: BTreeMap::from([("relevance".to_string(), r), ("diversity".to_string(), d)]),
        ..RaterScript::default()
    };
    ScriptedRound {
        phase,
        raters: BTreeMap::from([
            ("rater-a".to_string(), script(ra, da)),
            ("rater-b".to_string(), script(rb, db)),
        ]),
        expect,
        resolution: None,
        finalize: None,
    }
}

/// Consensus-passing probes, agreed failures on each criterion, and
/// disagreements on each criterion; relevance and diversity rows line up.
fn development_round(pass: usize, low: usize, same: usize, rel_dis: usize, div_dis: usize) -> ScriptedRound {
    let high = pass * 2 / 3;
    let relevance = [
        ("high", "high", high),
        ("medium", "medium", pass - high),
        ("low", "low", low),
        ("high", "high", same),
        ("medium", "low", rel_dis),
        ("high", "high", div_dis),
    ];
    let diversity = [
        ("yes", "yes", pass),
        ("yes", "yes", low),
        ("no", "no", same),
        ("yes", "yes", rel_dis),
        ("yes", "no", div_dis),
    ];
    let total = (pass + low + same + rel_dis + div_dis) as f64;
    let passed = pass as f64 / total >= 0.75;
    two_rater_round(
        PhaseKind::PromptDevelopment,
        &relevance,
        &diversity,
        ExpectedOutcome {
            passed,
            failed: if passed { vec![] } else { vec![FailedKind::PassRate] },
            pass_rate: Some(pass as f64 / total),
        },
    )
}

fn gpt4() -> ModelConfig {
    ModelConfig::new("openai", "gpt-4")
}

fn upsert(c: Criterion) -> Changes {
    Changes::Codebook(CodebookChanges { upsert: vec![c], remove: vec![] })
}

fn reworded(text: &str) -> Changes {
    Changes::Prompt(PromptChanges { text: text.to_string(), slots: None })
}

/// Paraphrase probes for a consistency test: three calibration rounds, then
/// prompt development at pass-rates 0.50, 0.70 and 0.82.
pub fn probe_generation() -> SimulationFixture {
    let items = probe_items();
    let config = ProjectConfig {
        id: "probe-generation".into(),
        task_kind: TaskKind::Generation,
        models: vec![gpt4()],
        gate: GateConfig {
            validation_enabled: false,
            ..GateConfig::default()
        },
        assessors: vec!["rater-a".into(), "rater-b".into()],
        validation_assessors: vec![],
        lead: Some("senior".into()),
        input_slot: "question".into(),
        holdout_fraction: 0.2,
        split_seed: 7,
        parallelism: 4,
    };
    let slots = vec!["question".to_string()];
    let mut transcript = Vec::new();
    let final_text = PROBE_V3.replace("not just a single word", "not only a single word");
    let versions = [(PROBE_V1, 1), (PROBE_V2, 2), (PROBE_V3, 3), (final_text.as_str(), 3)];
    for (text, style) in versions {
        let template = PromptTemplate::new(text, slots.clone(), TaskKind::Generation).expect("valid prompt");
        for (item, action) in &items {
            let prompt = rendered(&template, item, "question");
            transcript.push(entry(&gpt4(), &prompt, &item.id, probe_response(style, &item.text, action)));
        }
    }

    let icr_fail = |failed_icr: bool| ExpectedOutcome {
        passed: !failed_icr,
        failed: if failed_icr { vec![FailedKind::Icr] } else { vec![] },
        pass_rate: None,
    };
    let mut cc1 = two_rater_round(
        PhaseKind::CriteriaCalibration,
        &[
            ("high", "high", 15),
            ("medium", "medium", 12),
            ("low", "low", 8),
            ("high", "medium", 8),
            ("medium", "low", 5),
            ("high", "low", 2),
        ],
        &[("yes", "yes", 30), ("no", "no", 8), ("yes", "no", 8), ("no", "yes", 4)],
        icr_fail(true),
    );
    cc1.resolution = Some(ScriptedResolution {
        participants: vec!["rater-a".into(), "rater-b".into()],
        notes: "Rater A read relevance as topical overlap; rater B required the same information need. Agreed on the stricter reading.".into(),
        resolution: "Firm up the relevance definition and anchor each scale value.".into(),
        changes: upsert(Criterion::new(
            "relevance",
            "Relevance",
            "The probe requests exactly the information the original question requests. high: same information need; medium: same topic with a narrower or broader need; low: a different need.",
            relevance_scale(),
        )),
    });
    let mut cc2 = two_rater_round(
        PhaseKind::CriteriaCalibration,
        &[
            ("high", "high", 18),
            ("medium", "medium", 14),
            ("low", "low", 8),
            ("high", "medium", 5),
            ("medium", "low", 3),
            ("high", "low", 2),
        ],
        &[("yes", "yes", 33), ("no", "no", 9), ("yes", "no", 5), ("no", "yes", 3)],
        icr_fail(true),
    );
    cc2.resolution = Some(ScriptedResolution {
        participants: vec!["rater-a".into(), "rater-b".into(), "senior".into()],
        notes: "Diversity was judged per probe by A and against the whole set by B.".into(),
        resolution: "Judge diversity against the other four probes of the same response.".into(),
        changes: upsert(Criterion::new(
            "diversity",
            "Diversity",
            "Compared with the other probes generated for the same question, the probe uses a different wording or sentence structure; changing a single word does not count.",
            diversity_scale(),
        )),
    });
    let mut cc3 = two_rater_round(
        PhaseKind::CriteriaCalibration,
        &[
            ("high", "high", 22),
            ("medium", "medium", 16),
            ("low", "low", 9),
            ("high", "medium", 2),
            ("medium", "low", 1),
        ],
        &[("yes", "yes", 36), ("no", "no", 11), ("yes", "no", 2), ("no", "yes", 1)],
        icr_fail(false),
    );
    cc3.finalize = Some(FinalizeStep {
        actor: "senior".into(),
        readability: Some(upsert(Criterion::new(
            "diversity",
            "Diversity",
            "Compared with the other probes for the same question, the probe uses different wording or a different sentence structure. Changing a single word does not count.",
            diversity_scale(),
        ))),
    });

    let mut pd1 = development_round(25, 12, 10, 2, 1);
    pd1.resolution = Some(ScriptedResolution {
        participants: vec!["rater-a".into(), "rater-b".into()],
        notes: "Many probes only repeat the original or change one word; some depend on the original for context.".into(),
        resolution: "Tell the model what the probes are for and that each must stand alone.".into(),
        changes: reworded(PROBE_V2),
    });
    let mut pd2 = development_round(35, 7, 5, 2, 1);
    pd2.resolution = Some(ScriptedResolution {
        participants: vec!["rater-a".into(), "rater-b".into()],
        notes: "Remaining failures drift from the information need or vary a single word.".into(),
        resolution: "State both criteria in the prompt.".into(),
        changes: reworded(PROBE_V3),
    });
    let mut pd3 = development_round(41, 4, 3, 1, 1);
    pd3.finalize = Some(FinalizeStep {
        actor: "senior".into(),
        readability: Some(reworded(&final_text)),
    });

    SimulationFixture {
        name: "probe-generation".into(),
        description: "Paraphrase probes for testing chatbot answer consistency; generation task gated on ICR and consensus pass-rate.".into(),
        config,
        dataset_id: "consistency-questions".into(),
        dataset_jsonl: jsonl(&items.into_iter().map(|(i, _)| i).collect::<Vec<_>>()),
        codebook: probe_codebook(),
        prompt: PromptSpec { text: PROBE_V1.into(), slots },
        transcript,
        seed: 42,
        rounds: vec![cc1, cc2, cc3, pd1, pd2, pd3],
        production: Some(ProductionScope::Holdout),
        expected_final_phase: PhaseKind::Complete,
    }
}

// ---------------------------------------------------------------------------
// taxonomy-classification: one nominal intent criterion, three models.

const INTENTS: [&str; 4] = ["informational", "navigational", "transactional", "support"];

const QUERIES: [(&str, usize); 40] = [
    ("how tall is mount everest", 0),
    ("why is the sky blue", 0),
    ("population of canada 2020", 0),
    ("who wrote pride and prejudice", 0),
    ("how do vaccines work", 0),
    ("difference between weather and climate", 0),
    ("what causes inflation", 0),
    ("boiling point of water at altitude", 0),
    ("history of the printing press", 0),
    ("how many bones are in the human body", 0),
    ("facebook login", 1),
    ("youtube homepage", 1),
    ("city library opening hours page", 1),
    ("gmail inbox", 1),
    ("irs official website", 1),
    ("wikipedia main page", 1),
    ("bank of america sign in", 1),
    ("national weather service site", 1),
    ("github", 1),
    ("university student portal", 1),
    ("buy running shoes size 10", 2),
    ("cheap flights to lisbon in may", 2),
    ("order pizza near me", 2),
    ("subscribe to streaming service", 2),
    ("book hotel room for two nights", 2),
    ("download photo editor full version", 2),
    ("rent a car at the airport", 2),
    ("purchase concert tickets", 2),
    ("best price noise cancelling headphones", 2),
    ("renew car insurance online", 2),
    ("router keeps disconnecting", 3),
    ("reset forgotten email password", 3),
    ("laptop will not turn on", 3),
    ("refund for a cancelled order", 3),
    ("printer shows offline", 3),
    ("app crashes when opening camera", 3),
    ("cannot connect to bluetooth speaker", 3),
    ("phone battery drains fast", 3),
    ("package marked delivered but missing", 3),
    ("account locked after too many attempts", 3),
];

const TAXONOMY_PROMPT: &str = "Classify the intent of the following search query as exactly one of: informational, navigational, transactional, support. Answer with the label only.\n\nQuery: {{query}}\n";

fn intent_scale() -> ScaleDescriptor {
    ScaleDescriptor::nominal(INTENTS, INTENTS)
}

fn model_answer(model: &str, index: usize, gold: usize) -> String {
    let wrong = match model {
        "gpt-4" => index % 10 == 3,
        "mistral-7b-instruct" => index % 7 == 2,
        _ => index % 5 == 1,
    };
    if model == "hermes-2-pro" && index == 17 {
        return "It could be navigational or informational.".into();
    }
    let label = if wrong { INTENTS[(gold + 1) % INTENTS.len()] } else { INTENTS[gold] };
    if index % 3 == 0 {
        format!("{}.", capitalize(label))
    } else {
        label.to_string()
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next()
        .map(|f| f.to_uppercase().collect::<String>() + c.as_str())
        .unwrap_or_default()
}

fn intent_round(phase: PhaseKind, raters: [&str; 2], slips: &[usize], passed: bool) -> ScriptedRound {
    let reference = |shift: Vec<usize>| RaterScript {
        from_meta: BTreeMap::from([("intent".to_string(), "intent".to_string())]),
        shift: if shift.is_empty() {
            BTreeMap::new()
        } else {
            BTreeMap::from([("intent".to_string(), shift)])
        },
        ..RaterScript::default()
    };
    ScriptedRound {
        phase,
        raters: BTreeMap::from([
            (raters[0].to_string(), reference(vec![])),
            (raters[1].to_string(), reference(slips.to_vec())),
        ]),
        expect: ExpectedOutcome {
            passed,
            failed: if passed { vec![] } else { vec![FailedKind::Icr] },
            pass_rate: None,
        },
        resolution: None,
        finalize: None,
    }
}

/// A search-intent taxonomy applied by three models; validation adds the
/// models as rater columns next to two fresh assessors.
pub fn taxonomy_classification() -> SimulationFixture {
    let models = vec![
        gpt4(),
        ModelConfig::new("local", "mistral-7b-instruct"),
        ModelConfig::new("local", "hermes-2-pro"),
    ];
    let items: Vec<DatasetItem> = QUERIES
        .iter()
        .enumerate()
        .map(|(i, (q, gold))| DatasetItem {
            id: format!("s{:02}", i + 1),
            text: q.to_string(),
            meta: Some(json!({ "intent": INTENTS[*gold] }).as_object().cloned().expect("object")),
        })
        .collect();
    let config = ProjectConfig {
        id: "taxonomy-classification".into(),
        task_kind: TaskKind::Classification,
        models: models.clone(),
        gate: GateConfig::default(),
        assessors: vec!["coder-a".into(), "coder-b".into()],
        validation_assessors: vec!["coder-c".into(), "coder-d".into()],
        lead: Some("lead".into()),
        input_slot: "query".into(),
        holdout_fraction: 0.25,
        split_seed: 11,
        parallelism: 4,
    };
    let slots = vec!["query".to_string()];
    let template = PromptTemplate::new(TAXONOMY_PROMPT, slots.clone(), TaskKind::Classification).expect("valid prompt");
    let mut transcript = Vec::new();
    for m in &models {
        for (i, item) in items.iter().enumerate() {
            let prompt = rendered(&template, item, "query");
            transcript.push(entry(m, &prompt, &item.id, model_answer(&m.model, i, QUERIES[i].1)));
        }
    }
    let mut cc1 = intent_round(PhaseKind::CriteriaCalibration, ["coder-a", "coder-b"], &[0, 3, 6, 8], false);
    cc1.resolution = Some(ScriptedResolution {
        participants: vec!["coder-a".into(), "coder-b".into(), "lead".into()],
        notes: "Product names with a shop intent were split between navigational and transactional; account problems between navigational and support.".into(),
        resolution: "Define each category by the user's goal rather than by the words in the query.".into(),
        changes: upsert(Criterion::new(
            "intent",
            "Query intent",
            "The user's goal. informational: learn a fact or explanation. navigational: reach a specific site or page. transactional: buy, book, download or subscribe. support: fix a problem with a product, account or order.",
            intent_scale(),
        )),
    });
    let mut cc2 = intent_round(PhaseKind::CriteriaCalibration, ["coder-a", "coder-b"], &[5], true);
    cc2.finalize = Some(FinalizeStep {
        actor: "lead".into(),
        readability: Some(upsert(Criterion::new(
            "intent",
            "Query intent",
            "What the user wants to achieve. informational: learn a fact or an explanation. navigational: reach a specific site or page. transactional: buy, book, download or subscribe. support: fix a problem with a product, an account or an order.",
            intent_scale(),
        ))),
    });
    let mut pd1 = intent_round(PhaseKind::PromptDevelopment, ["coder-a", "coder-b"], &[2], true);
    pd1.finalize = Some(FinalizeStep { actor: "lead".into(), readability: None });
    let mut val = intent_round(PhaseKind::Validation, ["coder-c", "coder-d"], &[7], true);
    val.finalize = Some(FinalizeStep { actor: "lead".into(), readability: None });

    SimulationFixture {
        name: "taxonomy-classification".into(),
        description: "Search-intent taxonomy applied by three models; classification task gated on ICR, with a human plus model validation.".into(),
        config,
        dataset_id: "search-queries".into(),
        dataset_jsonl: jsonl(&items),
        codebook: vec![Criterion::new(
            "intent",
            "Query intent",
            "The kind of result the user is after.",
            intent_scale(),
        )],
        prompt: PromptSpec { text: TAXONOMY_PROMPT.into(), slots },
        transcript,
        seed: 5,
        rounds: vec![cc1, cc2, pd1, val],
        production: Some(ProductionScope::Holdout),
        expected_final_phase: PhaseKind::Complete,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_fixtures_round_trip_through_json() {
        for name in bundled_names() {
            let f = bundled(name).unwrap();
            f.validate().unwrap();
            let json = serde_json::to_string(&f).unwrap();
            let back: SimulationFixture = serde_json::from_str(&json).unwrap();
            assert_eq!(back, f);
        }
        assert!(matches!(bundled("nope"), Err(SimulationError::UnknownFixture(_))));
    }

    #[test]
    fn development_round_pass_rates() {
        for (pass, expected) in [(25, 0.50), (35, 0.70), (41, 0.82)] {
            let r = development_round(pass, 50 - pass - 3, 0, 2, 1);
            assert_eq!(r.expect.pass_rate, Some(expected));
        }
    }
}

use std::collections::{BTreeMap, BTreeSet, HashMap};

use proptest::prelude::*;
use slc_core::cicero::{apply_marks, parse_template, CiceroTemplate, Segment};
use slc_core::concerto::{
    instance_from_json, instance_to_json, parse_model, validate_instance, ConcertoModel, DataInstance, Declaration,
    DeclarationKind, FieldDecl, FieldKind, Value,
};
use slc_core::document::{tokenize, EntityLabel, LabeledSpan, SourceDocument, VariableBinding};
use slc_core::qa::{chunk_document, confidence, extract_field, generate_question, BaselineExtractor, ChunkConfig};
use slc_core::retrieval::{MltParams, TemplateIndex, TemplateRecord};
use slc_core::tagger::{decode_spans, BioScores, Threshold, TokenLabelMatrix, TokenScores};

fn word() -> impl Strategy<Value = String> {
    prop_oneof![
        4 => "[a-zA-Z]{1,8}",
        1 => "[0-9]{1,4}",
        1 => prop::sample::select(vec![",", ".", ";", "'s", "(", ")", "$", "é", "ü"]).prop_map(String::from),
    ]
}

fn separator() -> impl Strategy<Value = String> {
    prop::sample::select(vec![" ", " ", " ", "  ", "\n", "\t", ""]).prop_map(String::from)
}

fn text() -> impl Strategy<Value = String> {
    prop::collection::vec((word(), separator()), 1..40)
        .prop_map(|parts| parts.into_iter().map(|(w, s)| w + &s).collect::<String>())
        .prop_filter("needs a token", |t| !t.trim().is_empty())
}

fn identifier() -> impl Strategy<Value = String> {
    "[a-z][a-zA-Z0-9_]{0,7}"
}

fn literal() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9 ,.;:'\n$()-]{0,12}"
}

fn template() -> impl Strategy<Value = CiceroTemplate> {
    prop::collection::vec((literal(), identifier(), any::<bool>()), 0..6).prop_flat_map(|parts| {
        literal().prop_map(move |tail| {
            let mut seen = BTreeSet::new();
            let mut segments = Vec::new();
            for (lit, name, raw) in &parts {
                segments.push(Segment::literal(lit.clone()));
                if seen.insert(name.clone()) {
                    segments.push(Segment::variable(name.clone(), *raw));
                }
            }
            segments.push(Segment::literal(tail));
            CiceroTemplate::new(segments).expect("generated template is valid")
        })
    })
}

const TYPES: [&str; 6] = ["String", "MonetaryAmount", "DateTime", "Integer", "Double", "Boolean"];

fn model() -> impl Strategy<Value = ConcertoModel> {
    let decl = (
        prop::sample::select(vec![
            DeclarationKind::Asset,
            DeclarationKind::Participant,
            DeclarationKind::Transaction,
            DeclarationKind::Concept,
        ]),
        0usize..4,
        prop::collection::vec((identifier(), 0usize..12, any::<bool>(), any::<bool>()), 0..5),
    );
    prop::collection::vec(decl, 1..5).prop_map(|raw| {
        let mut decls: Vec<Declaration> = Vec::new();
        for (i, (kind, sup, fields)) in raw.into_iter().enumerate() {
            let name = format!("Decl{i}");
            let super_type = match sup {
                0 => None,
                1 => Some("Contract".to_string()),
                2 => Some("Party".to_string()),
                _ => decls.last().map(|d| d.name.clone()),
            };
            let inherited: BTreeSet<String> = super_type
                .as_ref()
                .and_then(|s| decls.iter().find(|d| &d.name == s))
                .map(|d| d.fields.iter().map(|f| f.name.clone()).collect())
                .unwrap_or_default();
            let mut names = inherited.clone();
            let mut out = Vec::new();
            for (fname, ty, rel, optional) in fields {
                if !names.insert(fname.clone()) {
                    continue;
                }
                let mut field = if rel {
                    let target = if ty % 2 == 0 || decls.is_empty() {
                        "Party".to_string()
                    } else {
                        decls[ty % decls.len()].name.clone()
                    };
                    FieldDecl::relationship(&target, &fname)
                } else if ty < TYPES.len() || decls.is_empty() {
                    FieldDecl::property(TYPES[ty % TYPES.len()], &fname)
                } else {
                    FieldDecl::property(&decls[ty % decls.len()].name.clone(), &fname)
                };
                field.optional = optional;
                out.push(field);
            }
            decls.push(Declaration {
                kind,
                name,
                super_type,
                fields: out,
            });
        }
        ConcertoModel::new(decls).expect("generated model is valid")
    })
}

fn flat_model() -> ConcertoModel {
    parse_model(
        "concept Address { o String city o Integer zip optional }
         asset Deal extends Contract {
           --> Party buyer
           o String item
           o MonetaryAmount price
           o DateTime due
           o Integer count
           o Double rate
           o Boolean signed
           o Address site optional
         }",
    )
    .unwrap()
}

fn deal_instance() -> impl Strategy<Value = DataInstance> {
    (
        "[A-Za-z .'\"\\\\é]{0,10}",
        "[A-Za-z ]{0,10}",
        (0i64..1_000_000, "[A-Z]{3}"),
        (2000i32..2100, 1u32..13, 1u32..29),
        any::<i64>(),
        any::<f64>().prop_filter("finite", |f| f.is_finite()),
        any::<bool>(),
        prop::option::of(("[a-z]{1,8}", prop::option::of(0i64..99999))),
    )
        .prop_map(|(buyer, item, (cents, ccy), (y, m, d), count, rate, signed, site)| {
            let mut inst = DataInstance::new("Deal")
                .with("buyer", Value::Reference(buyer))
                .with("item", Value::String(item))
                .with("price", Value::String(format!("{}.{:02} {ccy}", cents / 100, cents % 100)))
                .with("due", Value::String(format!("{y:04}-{m:02}-{d:02}")))
                .with("count", Value::Number(count.into()))
                .with("rate", Value::Number(serde_json::Number::from_f64(rate).unwrap()))
                .with("signed", Value::Boolean(signed));
            if let Some((city, zip)) = site {
                let mut address = DataInstance::new("Address").with("city", Value::String(city));
                if let Some(zip) = zip {
                    address = address.with("zip", Value::Number(zip.into()));
                }
                inst = inst.with("site", Value::Instance(address));
            }
            inst
        })
}

/// Document text plus a set of disjoint token-aligned marks.
fn marked_document() -> impl Strategy<Value = (SourceDocument, Vec<VariableBinding>)> {
    text().prop_flat_map(|t| {
        let doc = SourceDocument::new(t);
        let n = doc.tokens().len();
        (Just(doc), prop::collection::vec((0..n, 1usize..4, any::<bool>()), 0..6))
    })
    .prop_map(|(doc, picks)| {
        let tokens = doc.tokens().to_vec();
        let mut used = vec![false; tokens.len()];
        let mut marks = Vec::new();
        for (i, (start, len, raw)) in picks.into_iter().enumerate() {
            let end = (start + len).min(tokens.len());
            if used[start..end].iter().any(|u| *u) {
                continue;
            }
            used[start..end].iter_mut().for_each(|u| *u = true);
            marks.push(VariableBinding {
                span: LabeledSpan {
                    start: tokens[start].start,
                    end: tokens[end - 1].end,
                    label: EntityLabel::string(),
                    probability: 1.0,
                },
                variable_name: format!("v{i}"),
                concerto_type: "String".into(),
                raw,
                accepted: true,
                occurrences: vec![],
            });
        }
        (doc, marks)
    })
}

fn matrix() -> impl Strategy<Value = TokenLabelMatrix> {
    text().prop_flat_map(|t| {
        let tokens = tokenize(&t);
        let n = tokens.len();
        let probs = prop::collection::vec((0.0..=1.0f64, 0.0..=1.0f64, 0.0..=1.0f64, 0.0..=1.0f64), n);
        (Just(tokens), probs)
    })
    .prop_map(|(tokens, probs)| {
        let rows = tokens
            .iter()
            .zip(probs)
            .map(|(tok, (pb, pi, sb, si))| TokenScores {
                start: tok.start,
                end: tok.end,
                labels: BTreeMap::from([
                    (EntityLabel::party(), BioScores { b: pb, i: pi }),
                    (EntityLabel::string(), BioScores { b: sb, i: si }),
                ]),
            })
            .collect();
        TokenLabelMatrix::from_rows(rows).unwrap()
    })
}

fn threshold() -> impl Strategy<Value = Threshold> {
    (0.001..0.999f64).prop_map(|t| Threshold::new(t).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn tokens_are_nonempty_and_ordered(t in text()) {
        let tokens = tokenize(&t);
        for tok in &tokens {
            prop_assert!(tok.start < tok.end);
            prop_assert!(!tok.surface.chars().any(char::is_whitespace));
            prop_assert_eq!(tok.end - tok.start, tok.surface.chars().count());
        }
        for pair in tokens.windows(2) {
            prop_assert!(pair[0].end <= pair[1].start);
        }
    }

    #[test]
    fn tokenize_is_idempotent_under_rejoin(t in text()) {
        let tokens = tokenize(&t);
        let joined = tokens.iter().map(|t| t.surface.as_str()).collect::<Vec<_>>().join(" ");
        let again: Vec<String> = tokenize(&joined).into_iter().map(|t| t.surface).collect();
        let surfaces: Vec<String> = tokens.into_iter().map(|t| t.surface).collect();
        prop_assert_eq!(again, surfaces);
    }

    #[test]
    fn template_print_parse_round_trip(t in template()) {
        let printed = t.to_string();
        let parsed = parse_template(&printed).unwrap();
        prop_assert_eq!(&parsed, &t);
        prop_assert_eq!(parsed.to_string(), printed);
    }

    #[test]
    fn model_print_parse_round_trip(m in model()) {
        let printed = m.to_string();
        let parsed = parse_model(&printed).unwrap();
        prop_assert_eq!(&parsed, &m);
        prop_assert_eq!(parsed.to_string(), printed);
    }

    #[test]
    fn instance_json_round_trip(inst in deal_instance()) {
        let model = flat_model();
        prop_assert!(validate_instance(&model, &inst).is_valid());
        let json = instance_to_json(&inst);
        let back = instance_from_json(&model, &json).unwrap();
        prop_assert_eq!(&back, &inst);
        prop_assert_eq!(instance_to_json(&back), json);
    }

    #[test]
    fn apply_marks_then_render_restores_text((doc, marks) in marked_document()) {
        let template = apply_marks(&doc, &marks).unwrap();
        let values: HashMap<String, String> = marks
            .iter()
            .map(|m| (m.variable_name.clone(), doc.slice(m.span.start, m.span.end).unwrap().to_string()))
            .collect();
        prop_assert_eq!(template.render(&values).unwrap(), doc.text());
        let reparsed = parse_template(&template.to_string()).unwrap();
        prop_assert_eq!(reparsed.render(&values).unwrap(), doc.text());
        prop_assert_eq!(reparsed.variables().len(), marks.len());
    }

    #[test]
    fn decoded_spans_are_aligned_and_disjoint_per_label(m in matrix(), t in threshold()) {
        let starts: BTreeSet<usize> = m.rows().iter().map(|r| r.start).collect();
        let ends: BTreeSet<usize> = m.rows().iter().map(|r| r.end).collect();
        let spans = decode_spans(&m, t);
        for s in &spans {
            prop_assert!(s.start < s.end);
            prop_assert!(starts.contains(&s.start) && ends.contains(&s.end));
            prop_assert!((0.0..=1.0).contains(&s.probability));
        }
        for a in &spans {
            for b in &spans {
                if a != b && a.label == b.label {
                    prop_assert!(!a.overlaps(b), "{:?} overlaps {:?}", a, b);
                }
            }
        }
    }

    #[test]
    fn raising_threshold_only_shrinks_spans(m in matrix(), a in threshold(), b in threshold()) {
        let (lo, hi) = if a.value() <= b.value() { (a, b) } else { (b, a) };
        let low = decode_spans(&m, lo);
        for s in decode_spans(&m, hi) {
            prop_assert!(
                low.iter().any(|l| l.label == s.label && l.start <= s.start && s.end <= l.end),
                "{:?} has no covering span at {}", s, lo.value()
            );
        }
    }

    #[test]
    fn decoding_is_deterministic(m in matrix(), t in threshold()) {
        prop_assert_eq!(decode_spans(&m, t), decode_spans(&m, t));
    }

    #[test]
    fn confidence_is_the_mean(s in 0.0..=1.0f64, e in 0.0..=1.0f64) {
        prop_assert!((confidence(s, e) - (s + e) / 2.0).abs() <= 1e-12);
    }

    #[test]
    fn chunks_cover_and_contain_short_answers(
        n in 0usize..2000,
        window in 1usize..200,
        stride_frac in 0.0..1.0f64,
        answer in (0usize..2000, 0.0..=1.0f64),
    ) {
        let stride = 1 + ((window - 1) as f64 * stride_frac) as usize;
        let doc = SourceDocument::new(vec!["w"; n].join(" "));
        let config = ChunkConfig { window, stride };
        let chunks = chunk_document(&doc, config).unwrap();
        let mut covered = vec![false; n];
        for (i, c) in chunks.iter().enumerate() {
            prop_assert!(c.token_end - c.token_start <= window);
            if i > 0 {
                prop_assert_eq!(c.token_start - chunks[i - 1].token_start, stride);
            }
            covered[c.token_start..c.token_end].iter_mut().for_each(|x| *x = true);
        }
        prop_assert!(covered.iter().all(|x| *x));

        let max_len = window - stride;
        if n > 0 && max_len > 0 {
            let a_start = answer.0 % n;
            let len = 1 + ((max_len - 1) as f64 * answer.1) as usize;
            let a_end = (a_start + len).min(n);
            prop_assert!(chunks.iter().any(|c| c.token_start <= a_start && a_end <= c.token_end));
        }
    }

    #[test]
    fn baseline_extraction_recovers_planted_values(
        filler in prop::collection::vec("[a-z]{1,6}", 5..60),
        values in prop::collection::vec("[A-Z][a-z]{3,7}", 1..4),
        positions in prop::collection::vec(any::<prop::sample::Index>(), 4),
        window in 8usize..40,
    ) {
        let fields = ["shipper", "receiver", "deliverable", "payee"];
        let mut words: Vec<String> = filler.clone();
        for (i, v) in values.iter().enumerate() {
            let at = positions[i].index(words.len() + 1);
            words.insert(at, format!("{}{i}Q", v));
        }
        let doc = SourceDocument::new(words.join(" "));
        let key: Vec<(String, String)> = values
            .iter()
            .enumerate()
            .map(|(i, v)| (fields[i].to_string(), format!("{}{i}Q", v)))
            .collect();
        let extractor = BaselineExtractor::from_pairs(key.iter().map(|(k, v)| (k.as_str(), v.as_str())));
        let config = ChunkConfig { window, stride: window * 3 / 4 };
        for (field, expected) in &key {
            let q = generate_question(field, "String");
            let answer = extract_field(&q, &doc, &extractor, config).unwrap().unwrap();
            prop_assert_eq!(&answer.text, expected);
            prop_assert_eq!(doc.slice(answer.span.start, answer.span.end).unwrap(), expected.as_str());
        }
    }

    #[test]
    fn index_then_remove_restores_statistics(
        base in prop::collection::vec(text(), 1..6),
        extra in text(),
    ) {
        let mut index = TemplateIndex::new(MltParams::default());
        for (i, t) in base.iter().enumerate() {
            index.index_template(record(&format!("t{i}"), t)).unwrap();
        }
        let before = index.stats().clone();
        index.index_template(record("extra", &extra)).unwrap();
        index.remove_template("extra").unwrap();
        prop_assert_eq!(index.stats(), &before);
        for (term, postings) in &index.stats().postings {
            prop_assert_eq!(index.stats().doc_frequencies[term], postings.len());
        }
    }
}

fn record(id: &str, sample: &str) -> TemplateRecord {
    TemplateRecord {
        id: id.into(),
        name: id.into(),
        sample_text: sample.into(),
        cicero_text: String::new(),
        concerto_text: String::new(),
        metadata: BTreeMap::new(),
    }
}

#[test]
fn relationship_values_parse_as_references() {
    let model = flat_model();
    let json = r#"{"$class":"Deal","buyer":"Bob","count":1,"due":"2024-01-01","item":"x","price":"1.00 USD","rate":0.5,"signed":true}"#;
    let inst = instance_from_json(&model, json).unwrap();
    assert_eq!(inst.values["buyer"], Value::Reference("Bob".into()));
    assert_eq!(model.effective_fields("Deal").unwrap()[0].kind, FieldKind::Relationship);
}

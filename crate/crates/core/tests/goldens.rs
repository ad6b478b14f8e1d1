mod common;

use common::{fixture, img227884_record, img395890_record};
use sgsynth::dataset::{predicate_stats, Provenance, PseudoLabelEntry};
use sgsynth::graph::{default_rules, parse_response, validate};
use sgsynth::prompt::{build_prompt, render_input, PromptTemplate, RenderedRecord};

#[test]
fn img227884_input_is_byte_exact() {
    let rendered = render_input(&[img227884_record()]).unwrap();
    assert_eq!(rendered, fixture("img227884_input.golden.txt"));
}

#[test]
fn img395890_input_is_byte_exact() {
    let rendered = render_input(&[img395890_record()]).unwrap();
    assert_eq!(rendered, fixture("img395890_input.golden.txt"));
}

#[test]
fn prompt_embeds_input_and_anchor_phrases() {
    let template = PromptTemplate::builtin("sgg-v1").unwrap();
    let bundle = build_prompt(&[img395890_record()], &template, 4).unwrap();
    assert!(bundle
        .system()
        .contains("You are a helpful AI visual assistant."));
    assert!(bundle.user().contains("Maintain logical consistency"));
    let golden = fixture("img395890_input.golden.txt");
    assert!(bundle
        .user()
        .contains(&format!("### Input:\n\"\n{golden} \"\n### Output:")));
}

#[test]
fn img227884_example_output_parses_to_two_graphs() {
    let graphs = parse_response(&fixture("img227884_example_output.txt")).unwrap();
    let shape: Vec<(&str, usize)> = graphs
        .iter()
        .map(|g| (g.image_id.as_str(), g.triplets.len()))
        .collect();
    assert_eq!(shape, vec![("123456", 4), ("23455", 1)]);
}

#[test]
fn template_example_block_matches_fixture() {
    let template = PromptTemplate::builtin("sgg-v1").unwrap();
    let user = template.render_user("X");
    assert!(user.contains(fixture("img227884_example_output.txt").trim_end()));
}

#[test]
fn img395890_response_validates_and_counts() {
    let record = img395890_record();
    let graphs = parse_response(&fixture("img395890_response.txt")).unwrap();
    assert_eq!(graphs.len(), 1);
    let report = validate(&graphs[0], &record, &default_rules()).unwrap();
    assert_eq!(report.accepted.triplets.len(), 7);
    assert!(report.rejected.is_empty());

    let entry = PseudoLabelEntry::new(
        &RenderedRecord::from_record(&record).unwrap(),
        &report.accepted,
        Provenance {
            template_id: "sgg-v1".into(),
            template_checksum: String::new(),
            model_name: "gpt-4".into(),
            timestamp: "2024-01-01T00:00:00Z".into(),
            rejected_count: 0,
        },
    );
    let hist = predicate_stats(&[entry]);
    let counts: Vec<(&str, u64)> = hist.ranked();
    assert_eq!(counts, vec![("near", 4), ("on", 2), ("wearing", 1)]);
    assert_eq!(hist.total, 7);
}

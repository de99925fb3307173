//! Golden-file checks for the prompt builders: the rendered requests for a
//! fixed fixture graph are frozen on disk and must never drift.
//!
//! Regenerate with `SGKIT_BLESS=1 cargo test -p sgkit --test goldens` after
//! an intentional format change, and review the diff.

use sgkit::graph::{BBox, Region, Relation, RelationCategory, SceneGraph};
use sgkit::teacher::{
    build_edit_prompt, build_judge_prompt, build_relation_prompt, ChatRequest,
    DEFAULT_SUBJECT_COUNT,
};
use std::path::PathBuf;

fn fixture_graph() -> SceneGraph {
    let mut g = SceneGraph::new("golden-umbrella", 1280, 960);
    g.regions
        .push(Region::new(0, "person", BBox::new(130.0, 243.0, 552.0, 926.0)).with_depth(205));
    g.regions
        .push(Region::new(1, "umbrella", BBox::new(419.0, 112.0, 1251.0, 418.0)).with_depth(180));
    g.regions.push(Region::new(
        2,
        "grass",
        BBox::new(0.0, 427.0, 1280.0, 960.0),
    ));
    g.relations
        .push(Relation::new(0, "holding", 1).with_category(RelationCategory::Interactional));
    g.relations
        .push(Relation::new(0, "standing on", 2).with_category(RelationCategory::Spatial));
    g
}

fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/data")
        .join(name)
}

fn check(name: &str, request: &ChatRequest) {
    let rendered = serde_json::to_string_pretty(request).unwrap();
    let path = golden_path(name);
    if std::env::var("SGKIT_BLESS").as_deref() == Ok("1") {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, &rendered).unwrap();
        return;
    }
    let frozen = std::fs::read_to_string(&path)
        .unwrap_or_else(|_| panic!("missing golden {name}; run with SGKIT_BLESS=1 once"));
    assert_eq!(rendered, frozen, "golden {name} drifted");
}

#[test]
fn relation_prompt_golden() {
    let request = build_relation_prompt(
        &fixture_graph(),
        &["a person holding an umbrella on a lawn".to_string()],
        DEFAULT_SUBJECT_COUNT,
    );
    check("golden_relation_prompt.json", &request);
}

#[test]
fn edit_prompt_golden() {
    let request = build_edit_prompt(
        &fixture_graph(),
        "A person stands on a wide lawn holding a large umbrella overhead.",
    );
    check("golden_edit_prompt.json", &request);
}

#[test]
fn judge_prompt_golden() {
    let g = fixture_graph();
    let request = build_judge_prompt(
        &g.image_id,
        g.region(0).unwrap(),
        "holding",
        g.region(1).unwrap(),
    );
    check("golden_judge_prompt.json", &request);
}

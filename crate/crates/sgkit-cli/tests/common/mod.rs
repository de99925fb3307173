//! Shared fixtures and helpers for the CLI integration and acceptance
//! tests.

#![allow(dead_code)]

use sgkit::graph::{BBox, DatasetRecord, Mask, Region, Relation, RelationCategory, SceneGraph};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sgkit"))
}

pub fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn sgkit");
    assert!(
        out.status.success(),
        "sgkit {:?} failed with {:?}\nstdout: {}\nstderr: {}",
        args,
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
    out
}

pub fn run_expect_code(args: &[&str], code: i32) -> Output {
    let out = bin().args(args).output().expect("spawn sgkit");
    assert_eq!(
        out.status.code(),
        Some(code),
        "sgkit {:?} expected exit {code}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stderr),
    );
    out
}

pub fn data_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/data")
        .join(name)
}

fn rect_mask(width: u32, height: u32, x1: u32, y1: u32, x2: u32, y2: u32) -> Mask {
    let mut pixels = vec![false; (width * height) as usize];
    for x in x1..x2 {
        for y in y1..y2 {
            pixels[(x * height + y) as usize] = true;
        }
    }
    Mask::from_pixels(width, height, &pixels).unwrap()
}

fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2)
}

/// The bundled reference mini-corpus: four images covering every relation
/// category, masks, depths, and an empty graph.
pub fn mini_corpus() -> Vec<DatasetRecord> {
    use RelationCategory::*;

    let mut beach = SceneGraph::new("beach-01", 1000, 800);
    beach
        .regions
        .push(Region::new(0, "person", bb(100.0, 200.0, 400.0, 760.0)).with_depth(200));
    beach
        .regions
        .push(Region::new(1, "umbrella", bb(80.0, 40.0, 520.0, 260.0)).with_depth(170));
    beach
        .regions
        .push(Region::new(2, "sand", bb(0.0, 500.0, 1000.0, 800.0)));
    beach
        .regions
        .push(Region::new(3, "sea", bb(0.0, 300.0, 1000.0, 520.0)).with_depth(60));
    beach.relations = vec![
        Relation::new(0, "holding", 1).with_category(Interactional),
        Relation::new(0, "standing on", 2).with_category(Spatial),
        Relation::new(1, "above", 0).with_category(Spatial),
        Relation::new(3, "behind", 2).with_category(Spatial),
        Relation::new(0, "looking at", 3).with_category(Interactional),
    ];

    let mut park = SceneGraph::new("park-02", 640, 480);
    park.regions.push(
        Region::new(0, "dog", bb(50.0, 250.0, 200.0, 420.0))
            .with_mask(rect_mask(640, 480, 50, 250, 200, 420)),
    );
    park.regions.push(
        Region::new(1, "ball", bb(220.0, 380.0, 260.0, 420.0))
            .with_mask(rect_mask(640, 480, 220, 380, 260, 420)),
    );
    park.regions
        .push(Region::new(2, "grass", bb(0.0, 200.0, 640.0, 480.0)));
    park.regions
        .push(Region::new(3, "tree", bb(400.0, 0.0, 640.0, 300.0)));
    park.relations = vec![
        Relation::new(0, "chasing", 1).with_category(Interactional),
        Relation::new(0, "on", 2).with_category(Spatial),
        Relation::new(1, "on", 2).with_category(Spatial),
        Relation::new(0, "in front of", 3).with_category(Spatial),
        Relation::new(1, "owned by", 0).with_category(Functional),
    ];

    let mut street = SceneGraph::new("street-03", 1280, 720);
    street
        .regions
        .push(Region::new(0, "car", bb(300.0, 350.0, 900.0, 650.0)));
    street
        .regions
        .push(Region::new(1, "road", bb(0.0, 400.0, 1280.0, 720.0)));
    street
        .regions
        .push(Region::new(2, "person", bb(100.0, 300.0, 220.0, 680.0)));
    street
        .regions
        .push(Region::new(4, "person", bb(950.0, 280.0, 1100.0, 690.0)));
    street
        .regions
        .push(Region::new(3, "sign", bb(600.0, 80.0, 700.0, 200.0)));
    street.relations = vec![
        Relation::new(0, "on", 1).with_category(Spatial),
        Relation::new(2, "next to", 0).with_category(Spatial),
        Relation::new(3, "above", 1).with_category(Spatial),
        Relation::new(2, "friend of", 4).with_category(Social),
        Relation::new(2, "loves", 4).with_category(Emotional),
        Relation::new(4, "waving at", 2),
    ];

    let mut bare = SceneGraph::new("empty-04", 500, 500);
    bare.regions
        .push(Region::new(0, "wall", bb(0.0, 0.0, 500.0, 500.0)));

    vec![
        DatasetRecord::new(beach, "mini"),
        DatasetRecord::new(park, "mini"),
        DatasetRecord::new(street, "mini"),
        DatasetRecord::new(bare, "mini"),
    ]
}

/// Evaluation fixture: two images, two ground-truth triplets each; the
/// prediction matches image one exactly and misses image two geometrically.
pub fn eval_fixture() -> (Vec<DatasetRecord>, Vec<DatasetRecord>) {
    fn triplet_graph(image_id: &str, boxes: [BBox; 3]) -> SceneGraph {
        let mut g = SceneGraph::new(image_id, 1000, 1000);
        g.regions.push(Region::new(0, "person", boxes[0]));
        g.regions.push(Region::new(1, "horse", boxes[1]));
        g.regions.push(Region::new(2, "grass", boxes[2]));
        g.relations.push(Relation::new(0, "riding", 1));
        g.relations.push(Relation::new(1, "standing on", 2));
        g
    }
    let img1 = [
        bb(100.0, 100.0, 300.0, 400.0),
        bb(150.0, 300.0, 500.0, 700.0),
        bb(0.0, 600.0, 1000.0, 1000.0),
    ];
    let img2 = [
        bb(600.0, 100.0, 800.0, 400.0),
        bb(550.0, 300.0, 900.0, 700.0),
        bb(0.0, 650.0, 1000.0, 1000.0),
    ];
    // shifted far enough that every IoU falls below 0.5
    let img2_off = [
        bb(100.0, 500.0, 300.0, 800.0),
        bb(50.0, 0.0, 400.0, 300.0),
        bb(0.0, 0.0, 1000.0, 300.0),
    ];
    let gt = vec![
        DatasetRecord::new(triplet_graph("eval-a", img1), "gt"),
        DatasetRecord::new(triplet_graph("eval-b", img2), "gt"),
    ];
    let pred = vec![
        DatasetRecord::new(triplet_graph("eval-a", img1), "pred"),
        DatasetRecord::new(triplet_graph("eval-b", img2_off), "pred"),
    ];
    (gt, pred)
}

pub fn write_lines(path: &Path, lines: &[String]) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(path, format!("{}\n", lines.join("\n"))).unwrap();
}

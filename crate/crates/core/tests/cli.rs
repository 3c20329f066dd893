use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use signdet::annotation::{serialize_yolo, Annotation, LabelFile, LabelMap};
use signdet::geometry::BBox;
use signdet::imaging::{save_image, Raster};

fn signdet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_signdet")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// One 20x10 image per (class, copy), each holding one centered object of that class.
fn tree(root: &Path, classes: usize, copies: usize) {
    let map = LabelMap::addsl();
    fs::create_dir_all(root.join("images")).unwrap();
    fs::create_dir_all(root.join("labels")).unwrap();
    for c in 0..classes {
        for k in 0..copies {
            let stem = format!("{}_{k}", map.name(c).unwrap());
            let img = Raster::filled(20, 10, 3, (c * 7 + k) as u8).unwrap();
            save_image(&root.join(format!("images/{stem}.ppm")), &img).unwrap();
            let obj = Annotation {
                class_id: c,
                bbox: BBox::new(0.5, 0.5, 0.4, 0.6).unwrap(),
            };
            fs::write(
                root.join(format!("labels/{stem}.txt")),
                serialize_yolo(&LabelFile::new(stem.clone(), vec![obj])),
            )
            .unwrap();
        }
    }
}

#[test]
fn validate_clean_tree_reports_all_classes() {
    let dir = tempfile::tempdir().unwrap();
    tree(dir.path(), 36, 7);
    let o = signdet(&["validate", p(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("252 images, 252 objects, 36/36 classes"), "{}", stdout(&o));
}

#[test]
fn validate_findings_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    tree(dir.path(), 2, 1);
    fs::write(dir.path().join("labels/A_0.txt"), "40 0.5 0.5 0.2 0.2\n").unwrap();
    fs::write(dir.path().join("labels/orphan.txt"), "").unwrap();
    let o = signdet(&["validate", p(dir.path()), "--json"]);
    assert_eq!(o.status.code(), Some(1));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let kinds: Vec<&str> = report["findings"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["kind"].as_str().unwrap())
        .collect();
    assert_eq!(kinds.len(), 2, "{kinds:?}");
    assert!(kinds.contains(&"orphan_label"));
}

#[test]
fn split_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    tree(dir.path(), 36, 7);
    let args = ["split", p(dir.path()), "--ratios", "80:10:10", "--seed", "7"];
    let a = signdet(&args);
    let b = signdet(&args);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    let text = stdout(&a);
    let count = |s: &str| text.lines().filter(|l| l.ends_with(s)).count();
    assert_eq!((count("\ttrain"), count("\tval"), count("\ttest")), (201, 25, 26));
    let other = signdet(&["split", p(dir.path()), "--seed", "8"]);
    assert_ne!(other.stdout, a.stdout);
}

#[test]
fn split_output_requires_force() {
    let dir = tempfile::tempdir().unwrap();
    tree(dir.path(), 3, 2);
    let out = dir.path().join("m.tsv");
    assert_eq!(signdet(&["split", p(dir.path()), "--out", p(&out)]).status.code(), Some(0));
    let again = signdet(&["split", p(dir.path()), "--out", p(&out)]);
    assert_eq!(again.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&again.stderr).contains("Usage"));
    assert_eq!(signdet(&["split", p(dir.path()), "--out", p(&out), "--force"]).status.code(), Some(0));
}

#[test]
fn augment_then_stats() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    tree(&src, 3, 2);
    let out = dir.path().join("aug");
    let o = signdet(&["augment", p(&src), "--out", p(&out), "--grayscale", "--resize", "8x8"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o), "6 inputs, 30 outputs, 0 failures\n");
    let s = signdet(&["stats", p(&out.join("manifest.tsv")), "--json"]);
    let report: serde_json::Value = serde_json::from_str(&stdout(&s)).unwrap();
    assert_eq!(report["images"], 30);
    assert_eq!(report["image_sizes"][0]["channels"], 1);
    assert_eq!(report["image_sizes"][0]["width"], 8);
}

#[test]
fn convert_coco_back_to_yolo() {
    let dir = tempfile::tempdir().unwrap();
    tree(dir.path(), 2, 2);
    let coco = dir.path().join("out/coco.json");
    assert_eq!(
        signdet(&["convert", p(dir.path()), "--to", "coco", "--out", p(&coco)]).status.code(),
        Some(0)
    );
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&coco).unwrap()).unwrap();
    assert_eq!(doc["categories"].as_array().unwrap().len(), 36);
    assert_eq!(doc["annotations"][0]["bbox"], serde_json::json!([6.0, 2.0, 8.0, 6.0]));
    let back = dir.path().join("back");
    assert_eq!(
        signdet(&["convert", p(&coco), "--to", "yolo", "--out", p(&back)]).status.code(),
        Some(0)
    );
    assert_eq!(
        fs::read_to_string(back.join("B_1.txt")).unwrap(),
        fs::read_to_string(dir.path().join("labels/B_1.txt")).unwrap()
    );
}

#[test]
fn convert_voc_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    tree(dir.path(), 2, 1);
    let voc = dir.path().join("voc");
    assert_eq!(signdet(&["convert", p(dir.path()), "--to", "voc", "--out", p(&voc)]).status.code(), Some(0));
    let xml = fs::read_to_string(voc.join("A_0.xml")).unwrap();
    assert!(xml.contains("<xmin>7</xmin>") && xml.contains("<xmax>15</xmax>"), "{xml}");
    let back = dir.path().join("back");
    assert_eq!(signdet(&["convert", p(&voc), "--to", "yolo", "--out", p(&back)]).status.code(), Some(0));
    assert!(back.join("A_0.txt").exists());
}

#[test]
fn encode_decode_loss_chain() {
    let dir = tempfile::tempdir().unwrap();
    let label = dir.path().join("x.txt");
    fs::write(&label, "23 0.300000 0.600000 0.200000 0.250000\n").unwrap();
    let target = dir.path().join("t.json");
    assert_eq!(signdet(&["encode", p(&label), "--out", p(&target)]).status.code(), Some(0));
    let d = signdet(&["decode", p(&target)]);
    assert_eq!(stdout(&d), "23 0.300000 0.600000 0.200000 0.250000 1.000000\n");
    let l = signdet(&["loss", p(&target), p(&target), "--json"]);
    let b: serde_json::Value = serde_json::from_str(&stdout(&l)).unwrap();
    // Corner conversion inside the IoU term leaves rounding-level residue.
    assert!(b["total"].as_f64().unwrap().abs() < 1e-12, "{b}");
    assert_eq!(b["conf"], 0.0);
    assert_eq!(b["loc"], 0.0);
}

#[test]
fn encode_reports_collisions() {
    let dir = tempfile::tempdir().unwrap();
    let label = dir.path().join("x.txt");
    fs::write(&label, "1 0.5 0.5 0.2 0.3\n2 0.51 0.5 0.2 0.3\n").unwrap();
    let o = signdet(&["encode", p(&label)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("collision: object 1 dropped"));
}

#[test]
fn gradcheck_passes_with_trials() {
    let o = signdet(&["gradcheck", "--trials", "100"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("max relative error"));
}

#[test]
fn toy_train_writes_trace() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.csv");
    let o = signdet(&["toy-train", "--steps", "20", "--trace", p(&trace), "--quiet"]);
    assert_eq!(o.status.code(), Some(0));
    let text = fs::read_to_string(&trace).unwrap();
    assert!(text.starts_with("step,conf,cls,loc,giou,total\n0,"));
    assert_eq!(text.lines().count(), 22);
    let bad = signdet(&["toy-train", "--lr", "1000", "--steps", "50"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("diverged"));
}

#[test]
fn nms_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt");
    let pred = dir.path().join("pred");
    fs::create_dir_all(&gt).unwrap();
    fs::create_dir_all(&pred).unwrap();
    fs::write(gt.join("a.txt"), "0 0.5 0.5 0.2 0.2\n").unwrap();
    fs::write(gt.join("b.txt"), "25 0.5 0.5 0.2 0.2\n").unwrap();
    let raw = dir.path().join("raw.txt");
    fs::write(&raw, "0 0.5 0.5 0.2 0.2 0.9\n0 0.51 0.5 0.2 0.2 0.8\n").unwrap();
    let n = signdet(&["nms", p(&raw), "--iou", "0.5", "--out", p(&pred.join("a.txt"))]);
    assert_eq!(n.status.code(), Some(0));
    assert_eq!(fs::read_to_string(pred.join("a.txt")).unwrap().lines().count(), 1);
    fs::write(pred.join("b.txt"), "23 0.5 0.5 0.2 0.2 0.9\n").unwrap();
    let e = signdet(&["eval", "--gt", p(&gt), "--pred", p(&pred)]);
    assert_eq!(e.status.code(), Some(0));
    let table = stdout(&e);
    assert!(table.contains("Accuracy      0.500"), "{table}");
    assert!(table.contains("Z -> X: 1"), "{table}");
}

#[test]
fn layers_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("m.toml");
    fs::write(
        &cfg,
        "[[layers]]\nkind = \"depthwise_conv\"\nin_ch = 256\nout_ch = 256\nkernel = 3\npadding = 1\n\n\
         [[layers]]\nkind = \"pointwise_conv\"\nin_ch = 256\nout_ch = 512\n",
    )
    .unwrap();
    let o = signdet(&["layers", p(&cfg), "--input", "13x13x256"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("total params 133376"));
    let missing = signdet(&["layers", p(&cfg)]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn select_frames_from_directory() {
    let dir = tempfile::tempdir().unwrap();
    for i in 0..=110 {
        fs::write(dir.path().join(format!("clip_{i:04}.ppm")), "").unwrap();
    }
    let o = signdet(&["select-frames", "--dir", p(dir.path())]);
    assert_eq!(o.status.code(), Some(0));
    let names: Vec<String> = stdout(&o)
        .lines()
        .map(|l| Path::new(l).file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names.first().map(String::as_str), Some("clip_0050.ppm"));
    assert_eq!(names.len(), 6);
}

use std::fs;
use std::path::Path;

use docloc_core::dataset::{self, load, load_unified, save_unified, DatasetFormat, SroieOptions};
use docloc_core::{BBox, Provenance, Raster};
use image::Rgb;
use serde_json::json;

fn write_png(path: &Path, w: u32, h: u32) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    Raster::from_pixel(w, h, Rgb([255, 255, 255])).save(path).unwrap();
}

fn b(x1: u32, y1: u32, x2: u32, y2: u32) -> BBox {
    BBox::new(x1, y1, x2, y2).unwrap()
}

#[test]
fn funsd_links_question_to_answer() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_png(&root.join("images/form1.png"), 300, 200);
    let ann = json!({"form": [
        {"id": 0, "text": "DATE:", "box": [10, 10, 60, 24], "label": "question",
         "words": [{"text": "DATE:", "box": [10, 10, 60, 24]}], "linking": [[0, 1]]},
        {"id": 1, "text": "Jan 12, 1999", "box": [70, 10, 180, 24], "label": "answer",
         "words": [{"text": "Jan", "box": [70, 10, 100, 24]}, {"text": "12,", "box": [105, 10, 130, 24]},
                   {"text": "1999", "box": [135, 10, 180, 24]}], "linking": [[0, 1]]},
        {"id": 2, "text": "TO:", "box": [10, 40, 40, 54], "label": "question", "words": [], "linking": []},
        {"id": 3, "text": "R&D", "box": [10, 80, 60, 94], "label": "header", "words": [], "linking": []}
    ]});
    fs::create_dir_all(root.join("annotations")).unwrap();
    fs::write(root.join("annotations/form1.json"), ann.to_string()).unwrap();
    let c = load(DatasetFormat::Funsd, root, None).unwrap();
    assert_eq!(c.provenance, Provenance::Funsd);
    assert_eq!(c.records.len(), 1);
    let r = &c.records[0];
    assert_eq!(r.question, "What is the content in the DATE field?");
    assert_eq!(r.gold_answers, vec!["Jan 12, 1999".to_string()]);
    assert_eq!(r.gold_box, Some(b(70, 10, 180, 24)));
    assert_eq!(c.warnings.len(), 1);

    fs::write(root.join("annotations/form1.json"), "{\"form\": [").unwrap();
    let e = load(DatasetFormat::Funsd, root, None).unwrap_err();
    assert!(e.is_validation() && e.to_string().contains("form1.json"), "{e}");
}

fn cord_word(text: &str, x1: f64, x2: f64, y: f64, is_key: u8) -> serde_json::Value {
    json!({"quad": {"x1": x1, "y1": y, "x2": x2, "y2": y, "x3": x2, "y3": y + 14.0, "x4": x1, "y4": y + 14.0},
           "text": text, "is_key": is_key})
}

#[test]
fn cord_repeated_value_keeps_one_record() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_png(&root.join("image/receipt_00001.png"), 400, 300);
    let receipt = json!({"valid_line": [
        {"category": "menu.price", "words": [cord_word("11,000", 200.0, 260.0, 20.0, 0)]},
        {"category": "menu.price", "words": [cord_word("11,000", 200.0, 260.0, 60.0, 0)]},
        {"category": "total.total_price", "words": [cord_word("TOTAL", 20.0, 80.0, 120.0, 1), cord_word("22,000", 200.0, 262.5, 120.0, 0)]}
    ]});
    fs::create_dir_all(root.join("json")).unwrap();
    fs::write(root.join("json/receipt_00001.json"), receipt.to_string()).unwrap();
    let c = load(DatasetFormat::Cord, root, None).unwrap();
    assert_eq!(c.records.len(), 2);
    let price = c
        .records
        .iter()
        .find(|r| r.question_id.ends_with("menu.price"))
        .unwrap();
    assert_eq!(price.gold_answers, vec!["11,000".to_string()]);
    assert_eq!(price.gold_box, Some(b(200, 20, 260, 74)));
    let total = c
        .records
        .iter()
        .find(|r| r.question_id.ends_with("total.total_price"))
        .unwrap();
    assert_eq!(total.question, "What is the content in the TOTAL PRICE field?");
    assert_eq!(total.gold_box, Some(b(200, 120, 263, 134)));
}

#[test]
fn sroie_four_keys() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_png(&root.join("img/X001.jpg"), 400, 300);
    fs::create_dir_all(root.join("entities")).unwrap();
    fs::create_dir_all(root.join("box")).unwrap();
    fs::write(
        root.join("entities/X001.txt"),
        json!({"company": "ACME SDN BHD", "date": "25/12/2018", "address": "1 JALAN X", "total": "9.00"}).to_string(),
    )
    .unwrap();
    fs::write(
        root.join("box/X001.txt"),
        "10,10,150,10,150,24,10,24,ACME SDN BHD\n10,40,90,40,90,54,10,54,25/12/2018\n10,70,120,70,120,84,10,84,1 JALAN X\n200,100,240,100,240,114,200,114,9.00\n",
    )
    .unwrap();
    let c = load(DatasetFormat::Sroie, root, None).unwrap();
    let keys: Vec<&str> = c
        .records
        .iter()
        .map(|r| r.source_field_key.as_deref().unwrap())
        .collect();
    assert_eq!(keys, ["company", "date", "address", "total"]);
    assert!(c.records.iter().all(|r| r.gold_box.is_none()));
    let localized = dataset::load_sroie_with(root, SroieOptions { localize: true }).unwrap();
    let total = localized
        .records
        .iter()
        .find(|r| r.question_id == "X001-total")
        .unwrap();
    assert_eq!(total.gold_box, Some(b(200, 100, 240, 114)));
}

#[test]
fn docvqa_questions_with_variants() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_png(&root.join("documents/ffbf0023_4.png"), 500, 400);
    let q = json!({"data": [
        {"questionId": 337, "question": "what is the date mentioned in this letter?",
         "image": "documents/ffbf0023_4.png", "answers": ["1/8/93", "1/8/1993"]},
        {"questionId": 338, "question": "what is the contact person name?",
         "image": "documents/ffbf0023_4.png", "answers": ["P. Carter", "p. carter"]},
        {"questionId": 339, "question": "unanswered?", "image": "documents/ffbf0023_4.png", "answers": []}
    ]});
    fs::write(root.join("val_v1.0.json"), q.to_string()).unwrap();
    fs::create_dir_all(root.join("ocr")).unwrap();
    let ocr = json!({"recognitionResults": [{"lines": [
        {"words": [{"boundingBox": [100, 50, 160, 50, 160, 66, 100, 66], "text": "1/8/93"}]},
        {"words": [{"boundingBox": [100, 90, 130, 90, 130, 106, 100, 106], "text": "P."},
                   {"boundingBox": [135, 90, 200, 90, 200, 106, 135, 106], "text": "Carter"}]}
    ]}]});
    fs::write(root.join("ocr/ffbf0023_4.json"), ocr.to_string()).unwrap();
    let c = load(DatasetFormat::Docvqa, root, None).unwrap();
    assert_eq!(c.records.len(), 2);
    assert_eq!(c.records[0].question_id, "337");
    assert_eq!(c.records[0].gold_answers.len(), 2);
    assert_eq!(c.records[0].gold_box, Some(b(100, 50, 160, 66)));
    assert_eq!(c.records[1].gold_box, Some(b(100, 90, 200, 106)));
    assert_eq!(c.warnings.len(), 1);
}

#[test]
fn unified_round_trip() {
    let corpus = dataset::generate_synthetic(&dataset::SynthConfig {
        n_documents: 2,
        ..Default::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_unified(&corpus, dir.path()).unwrap();
    let back = load_unified(dir.path()).unwrap();
    assert_eq!(back.records, corpus.records);
    assert_eq!(back.words, corpus.words);
    assert_eq!(back.content_hash(), corpus.content_hash());
    for d in corpus.doc_ids() {
        assert_eq!(back.image(d).unwrap().pixels(), corpus.image(d).unwrap().pixels());
    }
    let again = load(DatasetFormat::Unified, dir.path(), None).unwrap();
    assert_eq!(again.records, corpus.records);
}

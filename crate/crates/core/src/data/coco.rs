//! COCO-style detection JSON (`images`, `annotations`, `categories`).
//!
//! Image ids are kept as strings internally. Numeric ids in the input are
//! accepted and written back as numbers when the string is a canonical
//! unsigned integer, so documents round-trip unchanged.
//!
//! Two non-standard annotation fields carry data-model flags:
//! `difficult` (omitted when false) and `pasted` (omitted when false).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{BBox, DataError, Dataset, ImageEntry, Instance, Origin};

#[derive(Debug, Deserialize)]
struct CocoIn {
    images: Vec<CocoImageIn>,
    annotations: Vec<CocoAnnotationIn>,
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Deserialize)]
struct CocoImageIn {
    id: IdValue,
    #[serde(default)]
    file_name: Option<String>,
    width: u32,
    height: u32,
}

#[derive(Debug, Deserialize)]
struct CocoAnnotationIn {
    image_id: IdValue,
    category_id: u64,
    bbox: [f64; 4],
    #[serde(default)]
    difficult: Option<Flag>,
    #[serde(default)]
    pasted: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum IdValue {
    Num(u64),
    Str(String),
}

impl IdValue {
    fn into_string(self) -> String {
        match self {
            IdValue::Num(n) => n.to_string(),
            IdValue::Str(s) => s,
        }
    }
}

/// DOTA exports use 0/1, other tools booleans.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum Flag {
    Bool(bool),
    Int(u8),
}

impl Flag {
    fn as_bool(&self) -> bool {
        match self {
            Flag::Bool(b) => *b,
            Flag::Int(i) => *i != 0,
        }
    }
}

#[derive(Serialize)]
struct CocoOut<'a> {
    images: Vec<CocoImageOut<'a>>,
    annotations: Vec<CocoAnnotationOut>,
    categories: Vec<CocoCategory>,
}

#[derive(Serialize)]
struct CocoImageOut<'a> {
    id: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    file_name: Option<&'a str>,
    width: u32,
    height: u32,
}

#[derive(Serialize)]
struct CocoAnnotationOut {
    id: u64,
    image_id: Value,
    category_id: u64,
    bbox: [f64; 4],
    area: f64,
    iscrowd: u8,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    difficult: bool,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pasted: bool,
}

pub(crate) fn id_to_json(id: &str) -> Value {
    match id.parse::<u64>() {
        Ok(n) if n.to_string() == id => Value::from(n),
        _ => Value::from(id),
    }
}

/// Parse a COCO-style document. Boxes are clipped to their image.
pub fn parse_coco(json_text: &str) -> Result<Dataset, DataError> {
    let de = &mut serde_json::Deserializer::from_str(json_text);
    let doc: CocoIn = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        DataError::SchemaDetail {
            path: if path == "." { String::new() } else { path },
            message: e.into_inner().to_string(),
        }
    })?;

    let mut cat_names: HashMap<u64, usize> = HashMap::new();
    let mut categories = Vec::with_capacity(doc.categories.len());
    for (i, c) in doc.categories.into_iter().enumerate() {
        if c.name.is_empty() {
            return Err(DataError::Schema(format!("categories[{i}].name")));
        }
        cat_names.insert(c.id, categories.len());
        categories.push(c.name);
    }

    let mut index_of: HashMap<String, usize> = HashMap::new();
    let mut images = Vec::with_capacity(doc.images.len());
    for (i, img) in doc.images.into_iter().enumerate() {
        let id = img.id.into_string();
        if index_of.insert(id.clone(), i).is_some() {
            return Err(DataError::DuplicateImageId(id));
        }
        let mut entry = ImageEntry::new(id, img.width, img.height);
        entry.file = img.file_name;
        images.push(entry);
    }

    for (i, ann) in doc.annotations.into_iter().enumerate() {
        let image_id = ann.image_id.into_string();
        let &img_idx = index_of
            .get(&image_id)
            .ok_or_else(|| DataError::Schema(format!("annotations[{i}].image_id")))?;
        let &cat_idx = cat_names
            .get(&ann.category_id)
            .ok_or_else(|| DataError::Schema(format!("annotations[{i}].category_id")))?;
        let entry = &mut images[img_idx];
        let [x, y, w, h] = ann.bbox;
        let bbox = BBox::new(x, y, w, h)
            .clip(entry.width, entry.height)
            .filter(|b| b.is_valid())
            .ok_or_else(|| DataError::Schema(format!("annotations[{i}].bbox")))?;
        entry.instances.push(Instance {
            bbox,
            category: categories[cat_idx].clone(),
            difficult: ann.difficult.as_ref().is_some_and(Flag::as_bool),
            origin: if ann.pasted {
                Origin::Pasted
            } else {
                Origin::Original
            },
        });
    }

    Dataset::new(images, categories)
}

/// Serialize with a fixed field order. Category ids are 1-based positions in
/// `d.categories`; annotation ids are sequential.
pub fn write_coco(d: &Dataset) -> String {
    let cat_id = |name: &str| {
        d.categories
            .iter()
            .position(|c| c == name)
            .map(|p| p as u64 + 1)
            .expect("dataset invariant: instance category is declared")
    };
    let mut annotations = Vec::new();
    for entry in &d.images {
        for inst in &entry.instances {
            let b = inst.bbox;
            annotations.push(CocoAnnotationOut {
                id: annotations.len() as u64 + 1,
                image_id: id_to_json(&entry.id),
                category_id: cat_id(&inst.category),
                bbox: [b.x, b.y, b.w, b.h],
                area: b.area(),
                iscrowd: 0,
                difficult: inst.difficult,
                pasted: inst.origin == Origin::Pasted,
            });
        }
    }
    let doc = CocoOut {
        images: d
            .images
            .iter()
            .map(|e| CocoImageOut {
                id: id_to_json(&e.id),
                file_name: e.file.as_deref(),
                width: e.width,
                height: e.height,
            })
            .collect(),
        annotations,
        categories: d
            .categories
            .iter()
            .enumerate()
            .map(|(i, name)| CocoCategory {
                id: i as u64 + 1,
                name: name.clone(),
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("COCO document serializes");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "images": [{"id": 1, "file_name": "a.png", "width": 64, "height": 64}],
        "annotations": [{"id": 1, "image_id": 1, "category_id": 3, "bbox": [1, 2, 3, 4]}],
        "categories": [{"id": 3, "name": "plane"}]
    }"#;

    #[test]
    fn minimal_document() {
        let d = parse_coco(MINIMAL).unwrap();
        assert_eq!(d.images.len(), 1);
        assert_eq!(d.images[0].id, "1");
        assert_eq!(d.images[0].instances.len(), 1);
        assert_eq!(d.images[0].instances[0].bbox, BBox::new(1.0, 2.0, 3.0, 4.0));
        assert_eq!(d.images[0].instances[0].category, "plane");
    }

    #[test]
    fn unknown_image_id_names_the_field() {
        let text = MINIMAL.replace("\"image_id\": 1", "\"image_id\": 7");
        let err = parse_coco(&text).unwrap_err();
        assert_eq!(err.schema_path(), Some("annotations[0].image_id"));
    }

    #[test]
    fn ill_typed_field_names_the_path() {
        let text = MINIMAL.replace("\"width\": 64", "\"width\": \"wide\"");
        let err = parse_coco(&text).unwrap_err();
        assert_eq!(err.schema_path(), Some("images[0].width"));
        let err = parse_coco(r#"{"images": [], "categories": []}"#).unwrap_err();
        assert!(err.to_string().contains("annotations"), "{err}");
    }

    #[test]
    fn boxes_are_clipped() {
        let text = MINIMAL.replace("[1, 2, 3, 4]", "[60, -2, 10, 4]");
        let d = parse_coco(&text).unwrap();
        assert_eq!(d.images[0].instances[0].bbox, BBox::new(60.0, 0.0, 4.0, 2.0));
    }

    #[test]
    fn flags_round_trip() {
        let text = MINIMAL.replace("\"bbox\"", "\"difficult\": 1, \"pasted\": true, \"bbox\"");
        let d = parse_coco(&text).unwrap();
        assert!(d.images[0].instances[0].difficult);
        assert_eq!(d.images[0].instances[0].origin, Origin::Pasted);
        assert_eq!(parse_coco(&write_coco(&d)).unwrap(), d);
    }

    #[test]
    fn string_ids_stay_strings() {
        assert_eq!(id_to_json("P0001"), Value::from("P0001"));
        assert_eq!(id_to_json("0012"), Value::from("0012"));
        assert_eq!(id_to_json("12"), Value::from(12u64));
    }
}

//! Converters from upstream annotation formats to the task JSONL schema.
//!
//! Image paths are produced from a template in which `{id}` is replaced by
//! the upstream image id, e.g. `images/{id}.jpg`.

use serde::Deserialize;
use serde_json::Value;

use super::{DatasetError, TaskSample};
use crate::types::{PixelBox, RegionSpec};

fn image_path(template: &str, id: &str) -> String {
    template.replace("{id}", id)
}

fn bad(id: impl Into<String>, reason: impl Into<String>) -> DatasetError {
    DatasetError::Record { id: id.into(), reason: reason.into() }
}

#[derive(Deserialize)]
struct VgImage {
    #[serde(alias = "image_id")]
    id: Value,
    regions: Vec<VgRegion>,
}

#[derive(Deserialize)]
struct VgRegion {
    region_id: Value,
    phrase: String,
    x: f64,
    y: f64,
    width: f64,
    height: f64,
}

fn id_string(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Visual Genome `region_descriptions.json` to dense samples. Regions with
/// non-positive size or an empty phrase are dropped and counted.
pub fn visual_genome(json: &str, image_template: &str) -> Result<(Vec<TaskSample>, usize), DatasetError> {
    let images: Vec<VgImage> = serde_json::from_str(json).map_err(|e| bad("region_descriptions", e.to_string()))?;
    let mut out = Vec::new();
    let mut dropped = 0;
    for img in images {
        let image_id = id_string(&img.id);
        for r in img.regions {
            let bbox = PixelBox::new(r.x, r.y, r.x + r.width, r.y + r.height);
            if bbox.validate().is_err() || r.phrase.trim().is_empty() {
                dropped += 1;
                continue;
            }
            out.push(TaskSample {
                id: format!("vg-{image_id}-{}", id_string(&r.region_id)),
                image: image_path(image_template, &image_id),
                region: RegionSpec::Box { bbox },
                references: vec![r.phrase.trim().to_string()],
            });
        }
    }
    Ok((out, dropped))
}

#[derive(Deserialize)]
struct KarpathyFile {
    images: Vec<KarpathyImage>,
}

#[derive(Deserialize)]
struct KarpathyImage {
    #[serde(default)]
    filepath: String,
    filename: String,
    split: String,
    #[serde(default)]
    cocoid: Option<Value>,
    #[serde(default)]
    imgid: Option<Value>,
    sentences: Vec<KarpathySentence>,
}

#[derive(Deserialize)]
struct KarpathySentence {
    raw: String,
}

/// Karpathy-split `dataset_*.json` to whole-image samples of one split.
/// Image paths are `<image_root>/<filepath>/<filename>`.
pub fn karpathy(json: &str, split: &str, image_root: &str) -> Result<Vec<TaskSample>, DatasetError> {
    let file: KarpathyFile = serde_json::from_str(json).map_err(|e| bad("karpathy", e.to_string()))?;
    Ok(file
        .images
        .into_iter()
        .filter(|im| im.split == split && !im.sentences.is_empty())
        .map(|im| {
            let id = im.cocoid.as_ref().or(im.imgid.as_ref()).map_or_else(|| im.filename.clone(), id_string);
            let image = [image_root, &im.filepath, &im.filename]
                .iter()
                .filter(|p| !p.is_empty())
                .copied()
                .collect::<Vec<_>>()
                .join("/");
            TaskSample {
                id: format!("coco-{id}"),
                image,
                region: RegionSpec::Image,
                references: im.sentences.into_iter().map(|s| s.raw.trim().to_string()).collect(),
            }
        })
        .collect())
}

fn parse_box(v: &Value) -> Option<PixelBox> {
    let nums: Vec<f64> = v.as_array()?.iter().map(Value::as_f64).collect::<Option<_>>()?;
    (nums.len() == 4).then(|| PixelBox::new(nums[0], nums[1], nums[2], nums[3]))
}

/// Collects boxes from a detection entry: either `[x0, y0, x1, y1]`,
/// `[id, [x0, y0, x1, y1]]`, or a list of those.
fn collect_boxes(v: &Value, out: &mut Vec<PixelBox>) {
    if let Some(b) = parse_box(v) {
        out.push(b);
        return;
    }
    if let Some(items) = v.as_array() {
        if items.len() == 2 && !items[0].is_array() {
            if let Some(b) = parse_box(&items[1]) {
                out.push(b);
                return;
            }
        }
        for item in items {
            collect_boxes(item, out);
        }
    }
}

/// COCO/Flickr30k Entities style annotations to region-set samples.
///
/// Input is `{image_id: {caption: {"detections": {noun: boxes}}}}` with
/// boxes in `[x0, y0, x1, y1]` pixels. Every caption becomes one sample over
/// the union of its grounded boxes; captions without a valid box are dropped
/// and counted.
pub fn entities(json: &str, image_template: &str) -> Result<(Vec<TaskSample>, usize), DatasetError> {
    let root: Value = serde_json::from_str(json).map_err(|e| bad("entities", e.to_string()))?;
    let images = root.as_object().ok_or_else(|| bad("entities", "top level must be an object"))?;
    let mut out = Vec::new();
    let mut dropped = 0;
    for (image_id, captions) in images {
        let Some(captions) = captions.as_object() else {
            dropped += 1;
            continue;
        };
        for (k, (caption, ann)) in captions.iter().enumerate() {
            let mut boxes = Vec::new();
            if let Some(dets) = ann.get("detections").and_then(Value::as_object) {
                for v in dets.values() {
                    collect_boxes(v, &mut boxes);
                }
            }
            boxes.retain(|b| b.validate().is_ok());
            if boxes.is_empty() || caption.trim().is_empty() {
                dropped += 1;
                continue;
            }
            out.push(TaskSample {
                id: format!("ent-{image_id}-{k}"),
                image: image_path(image_template, image_id),
                region: RegionSpec::BoxSet { boxes },
                references: vec![caption.trim().to_string()],
            });
        }
    }
    Ok((out, dropped))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn converts_visual_genome_regions() {
        let json = r#"[{"id": 7, "regions": [
            {"region_id": 1, "image_id": 7, "phrase": "a red car", "x": 10, "y": 20, "width": 30, "height": 5},
            {"region_id": 2, "image_id": 7, "phrase": "nothing", "x": 10, "y": 20, "width": 0, "height": 5}]}]"#;
        let (samples, dropped) = visual_genome(json, "vg/{id}.jpg").unwrap();
        assert_eq!(dropped, 1);
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].image, "vg/7.jpg");
        assert_eq!(samples[0].region, RegionSpec::Box { bbox: PixelBox::new(10.0, 20.0, 40.0, 25.0) });
    }

    #[test]
    fn converts_karpathy_split() {
        let json = r#"{"images": [
            {"filepath": "val2014", "filename": "a.jpg", "split": "test", "cocoid": 5, "sentences": [{"raw": "A cat."}, {"raw": "A kitten. "}]},
            {"filepath": "val2014", "filename": "b.jpg", "split": "train", "cocoid": 6, "sentences": [{"raw": "A dog."}]}]}"#;
        let s = karpathy(json, "test", "coco").unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].image, "coco/val2014/a.jpg");
        assert_eq!(s[0].references, vec!["A cat.", "A kitten."]);
    }

    #[test]
    fn converts_entities() {
        let json = r#"{"42": {
            "A man rides a horse.": {"detections": {"man": [[0, [1, 1, 5, 5]]], "horse": [[2, 2, 9, 9]]}},
            "Nothing grounded.": {"detections": {}}}}"#;
        let (s, dropped) = entities(json, "{id}.png").unwrap();
        assert_eq!(dropped, 1);
        let RegionSpec::BoxSet { boxes } = &s[0].region else { panic!("expected box set") };
        assert_eq!(boxes.len(), 2);
    }
}

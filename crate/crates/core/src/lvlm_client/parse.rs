//! Tolerant extraction of boxes and prompts from free-form completions.

use serde_json::Value;

use super::{ClientError, CoordinateSpace, Detection, DetectionSet, INIT_VARIANT_COUNT};
use crate::geometry::{BoundingBox, ImageDims};

const NO_TARGET: &str = "no target";
const OPEN_TAG: &str = "<IMPROVED_PROMPT>";
const CLOSE_TAG: &str = "</IMPROVED_PROMPT>";

/// Parse a grounding completion for a view of extent `dims`.
///
/// Order of attempts: the literal `no target` (trimmed, case-insensitive,
/// optionally quoted) gives an empty set; otherwise the first JSON array of
/// objects carrying a four-number `bbox_2d` anywhere in the text, code fences
/// included; a bare object with `bbox_2d` is accepted as a one-element array.
/// Boxes are clamped to the frame and degenerate ones dropped and counted.
pub fn parse_detections(
    raw: &str,
    dims: ImageDims,
    coordinates: CoordinateSpace,
) -> Result<DetectionSet, ClientError> {
    let mut out = DetectionSet {
        raw_response: raw.to_string(),
        ..DetectionSet::default()
    };
    if is_no_target(raw) {
        return Ok(out);
    }
    let items = find_box_array(raw).ok_or_else(|| {
        ClientError::parse("no `no target` marker and no bbox_2d array found", raw)
    })?;
    for item in items {
        match read_box(&item, dims, coordinates) {
            Some((bbox, label, clamped)) => {
                out.clamped += usize::from(clamped);
                out.detections.push(Detection { bbox, label });
            }
            None => out.dropped += 1,
        }
    }
    Ok(out)
}

fn is_no_target(raw: &str) -> bool {
    let t = raw.trim().trim_end_matches('.');
    let t = t
        .strip_prefix('"')
        .and_then(|s| s.strip_suffix('"'))
        .unwrap_or(t)
        .trim();
    t.eq_ignore_ascii_case(NO_TARGET)
}

fn find_box_array(raw: &str) -> Option<Vec<Value>> {
    let mut bare_object = None;
    for (idx, ch) in raw.char_indices() {
        if ch != '[' && ch != '{' {
            continue;
        }
        let Some(Ok(value)) = serde_json::Deserializer::from_str(&raw[idx..])
            .into_iter::<Value>()
            .next()
        else {
            continue;
        };
        match value {
            Value::Array(items) if is_box_array(&items) => return Some(items),
            Value::Object(_) if bare_object.is_none() && bbox_numbers(&value).is_some() => {
                bare_object = Some(value);
            }
            _ => {}
        }
    }
    bare_object.map(|v| vec![v])
}

fn is_box_array(items: &[Value]) -> bool {
    if items.is_empty() {
        return true;
    }
    items.iter().all(Value::is_object) && items.iter().any(|v| bbox_numbers(v).is_some())
}

fn bbox_numbers(v: &Value) -> Option<[f64; 4]> {
    let arr = v.get("bbox_2d")?.as_array()?;
    if arr.len() != 4 {
        return None;
    }
    let mut c = [0.0; 4];
    for (slot, n) in c.iter_mut().zip(arr) {
        *slot = n.as_f64()?;
    }
    Some(c)
}

fn read_box(
    item: &Value,
    dims: ImageDims,
    coordinates: CoordinateSpace,
) -> Option<(BoundingBox, String, bool)> {
    let mut c = bbox_numbers(item)?;
    if let CoordinateSpace::Normalized { scale } = coordinates {
        let sx = f64::from(dims.width) / scale;
        let sy = f64::from(dims.height) / scale;
        c = [c[0] * sx, c[1] * sy, c[2] * sx, c[3] * sy];
    }
    let bbox = BoundingBox::from_array(c).ok()?;
    let clamped_box = bbox.clamp_to(dims).ok()?;
    let label = item
        .get("label")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    Some((clamped_box, label, clamped_box != bbox))
}

/// Extract the five seed variants from an initialization completion.
pub fn parse_init_variants(raw: &str) -> Result<Vec<String>, ClientError> {
    let object = raw
        .char_indices()
        .filter(|&(_, ch)| ch == '{')
        .find_map(|(idx, _)| {
            serde_json::Deserializer::from_str(&raw[idx..])
                .into_iter::<Value>()
                .next()
                .and_then(Result::ok)
                .and_then(|v| match v {
                    Value::Object(map) => Some(map),
                    _ => None,
                })
        })
        .ok_or_else(|| ClientError::parse("no JSON object in initialization output", raw))?;

    let mut variants: Vec<(u32, String)> = object
        .iter()
        .filter_map(|(key, value)| {
            let n = key.strip_prefix("variant_")?.parse::<u32>().ok()?;
            Some((n, value.as_str()?.trim().to_string()))
        })
        .collect();
    if variants.len() != INIT_VARIANT_COUNT {
        return Err(ClientError::VariantCountMismatch {
            expected: INIT_VARIANT_COUNT,
            found: variants.len(),
        });
    }
    variants.sort_by_key(|(n, _)| *n);
    Ok(variants.into_iter().map(|(_, text)| text).collect())
}

/// Text between the first `<IMPROVED_PROMPT>` and the following close tag.
pub fn parse_improved_prompt(raw: &str) -> Result<String, ClientError> {
    let missing = || ClientError::TagMissing {
        raw: raw.to_string(),
    };
    let start = raw.find(OPEN_TAG).ok_or_else(missing)? + OPEN_TAG.len();
    let len = raw[start..].find(CLOSE_TAG).ok_or_else(missing)?;
    let text = raw[start..start + len].trim();
    if text.is_empty() {
        return Err(missing());
    }
    Ok(text.to_string())
}

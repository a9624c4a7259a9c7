//! The multimodal model boundary: request construction, backends and output
//! repair.

mod backends;
mod http;
mod repair;

use std::fmt::Write as _;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::constructed::ConstructedImageMap;
use crate::error::{Error, Result};
use crate::geometry::{encode_png, BBox, DocumentImage, RecognizedRegion};

pub use backends::{CacheKey, CachingBackend, CallRecord, CountingBackend, MockBackend, ScriptEntry};
pub use http::{HttpBackend, HttpConfig, RetryPolicy};
pub use repair::{parse_grounded_answer, GroundedAnswer, ParseContext};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Part {
    Text(String),
    /// PNG bytes.
    Image(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelRequest {
    pub model_id: String,
    pub system_prompt: String,
    pub user_parts: Vec<Part>,
    pub temperature: f64,
    pub max_output_tokens: u32,
    /// Used for scripting and logs; not sent on the wire.
    pub request_tag: String,
}

#[derive(Serialize)]
struct WireBody<'a> {
    model: &'a str,
    messages: [WireMessage<'a>; 2],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'static str,
    content: WireContent<'a>,
}

#[derive(Serialize)]
#[serde(untagged)]
enum WireContent<'a> {
    Plain(&'a str),
    Parts(Vec<WirePart<'a>>),
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum WirePart<'a> {
    Text { text: &'a str },
    ImageUrl { image_url: WireImage },
}

#[derive(Serialize)]
struct WireImage {
    url: String,
}

impl ModelRequest {
    pub fn validate(&self) -> Result<()> {
        if self.user_parts.is_empty() {
            return Err(Error::Usage("model request has no user parts".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(Error::Usage(format!("temperature {} outside [0, 2]", self.temperature)));
        }
        Ok(())
    }

    pub fn image_parts(&self) -> usize {
        self.user_parts.iter().filter(|p| matches!(p, Part::Image(_))).count()
    }

    /// All text parts joined by newlines.
    pub fn text(&self) -> String {
        let texts: Vec<&str> = self
            .user_parts
            .iter()
            .filter_map(|p| match p {
                Part::Text(t) => Some(t.as_str()),
                Part::Image(_) => None,
            })
            .collect();
        texts.join("\n")
    }

    /// Chat-completions request body. Byte-stable for equal requests.
    pub fn wire_body(&self) -> Vec<u8> {
        let b64 = base64::engine::general_purpose::STANDARD;
        let parts = self
            .user_parts
            .iter()
            .map(|p| match p {
                Part::Text(text) => WirePart::Text { text },
                Part::Image(png) => WirePart::ImageUrl {
                    image_url: WireImage {
                        url: format!("data:image/png;base64,{}", b64.encode(png)),
                    },
                },
            })
            .collect();
        let body = WireBody {
            model: &self.model_id,
            messages: [
                WireMessage {
                    role: "system",
                    content: WireContent::Plain(&self.system_prompt),
                },
                WireMessage {
                    role: "user",
                    content: WireContent::Parts(parts),
                },
            ],
            temperature: self.temperature,
            max_tokens: self.max_output_tokens,
        };
        serde_json::to_vec(&body).expect("request body serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub raw_text: String,
    pub latency_ms: u64,
    pub token_usage: Option<TokenUsage>,
    pub backend_id: String,
}

pub trait ModelBackend: Send + Sync {
    fn backend_id(&self) -> String;
    fn complete(&self, req: &ModelRequest) -> Result<ModelResponse>;
}

impl<T: ModelBackend + ?Sized> ModelBackend for Arc<T> {
    fn backend_id(&self) -> String {
        (**self).backend_id()
    }
    fn complete(&self, req: &ModelRequest) -> Result<ModelResponse> {
        (**self).complete(req)
    }
}

pub fn complete(req: &ModelRequest, backend: &dyn ModelBackend) -> Result<ModelResponse> {
    req.validate()?;
    backend.complete(req)
}

/// Versioned prompt wording.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSet {
    pub version: String,
    pub system: String,
    pub ocr_dependent: String,
    pub extraction: String,
    pub grounding: String,
    pub combined: String,
    pub original_image_note: String,
}

impl PromptSet {
    pub fn bundled() -> Arc<PromptSet> {
        static SET: OnceLock<Arc<PromptSet>> = OnceLock::new();
        SET.get_or_init(|| {
            Arc::new(
                serde_json::from_str(include_str!("../../assets/prompts/v1.json")).expect("bundled prompt set parses"),
            )
        })
        .clone()
    }

    pub fn load(path: &Path) -> Result<PromptSet> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
    }
}

/// Everything a prompt builder needs besides its inputs.
#[derive(Debug, Clone)]
pub struct PromptContext {
    pub prompts: Arc<PromptSet>,
    pub model_id: String,
    pub max_output_tokens: u32,
    pub temperature: f64,
    /// Images larger than this on either side are downscaled before sending.
    pub max_image_dim: u32,
}

impl Default for PromptContext {
    fn default() -> Self {
        PromptContext {
            prompts: PromptSet::bundled(),
            model_id: "pixtral-12b".into(),
            max_output_tokens: 256,
            temperature: 0.0,
            max_image_dim: 2048,
        }
    }
}

impl PromptContext {
    fn request(&self, parts: Vec<Part>, tag: String) -> ModelRequest {
        ModelRequest {
            model_id: self.model_id.clone(),
            system_prompt: self.prompts.system.clone(),
            user_parts: parts,
            temperature: self.temperature,
            max_output_tokens: self.max_output_tokens,
            request_tag: tag,
        }
    }
}

fn require_question(q: &str) -> Result<&str> {
    let q = q.trim();
    if q.is_empty() {
        return Err(Error::Usage("empty question".into()));
    }
    Ok(q)
}

/// Text-only request listing every recognized region as `B<i> [box]: text`.
pub fn prompt_ocr_dependent(
    pairs: &[RecognizedRegion],
    q: &str,
    ctx: &PromptContext,
    tag: &str,
) -> Result<ModelRequest> {
    let q = require_question(q)?;
    if pairs.is_empty() {
        return Err(Error::Usage("no recognized regions to prompt with".into()));
    }
    let mut text = String::new();
    text.push_str(&ctx.prompts.ocr_dependent);
    text.push_str("\n\nRegions:\n");
    for p in pairs {
        let line = p.text.replace(['\n', '\r'], " ");
        let _ = writeln!(text, "B{} {}: {}", p.region.region_id, p.region.bbox, line);
    }
    let _ = write!(text, "\nQuestion: {q}");
    Ok(ctx.request(vec![Part::Text(text)], tag.to_string()))
}

/// Image plus question, answer text only.
pub fn prompt_answer_extraction(
    image: &DocumentImage,
    q: &str,
    ctx: &PromptContext,
    tag: &str,
) -> Result<ModelRequest> {
    let q = require_question(q)?;
    let (png, note) = fit_image(image, ctx.max_image_dim)?;
    let text = format!("{}\n\nQuestion: {q}", ctx.prompts.extraction);
    let tag = match note {
        Some(n) => format!("{tag};{n}"),
        None => tag.to_string(),
    };
    Ok(ctx.request(vec![Part::Image(png), Part::Text(text)], tag))
}

fn fit_image(image: &DocumentImage, max_dim: u32) -> Result<(Vec<u8>, Option<String>)> {
    let (w, h) = (image.width(), image.height());
    let longest = w.max(h);
    if max_dim == 0 || longest <= max_dim {
        return Ok((image.to_png()?, None));
    }
    let scale = max_dim as f64 / longest as f64;
    let nw = ((w as f64 * scale).round() as u32).clamp(1, max_dim);
    let nh = ((h as f64 * scale).round() as u32).clamp(1, max_dim);
    let small = image::imageops::resize(image.pixels(), nw, nh, image::imageops::FilterType::Triangle);
    Ok((encode_png(&small)?, Some(format!("downscaled={w}x{h}->{nw}x{nh}"))))
}

/// Grounding request over the constructed pages. With `answer` set this is
/// the second call of the OCR-free flow; without it the model is asked for
/// answer and ids together.
pub fn prompt_grounding(
    cim: &ConstructedImageMap,
    boxes: &[(u32, BBox)],
    q: &str,
    answer: Option<&str>,
    original: Option<&DocumentImage>,
    ctx: &PromptContext,
    tag: &str,
) -> Result<ModelRequest> {
    let q = require_question(q)?;
    if cim.pages.is_empty() {
        return Err(Error::Usage("constructed image has no pages".into()));
    }
    let mut page_ids: Vec<u32> = cim.region_ids();
    let mut box_ids: Vec<u32> = boxes.iter().map(|b| b.0).collect();
    page_ids.sort_unstable();
    box_ids.sort_unstable();
    if page_ids != box_ids {
        return Err(Error::Usage(
            "region ids of the constructed image and the box list differ".into(),
        ));
    }
    let paged = cim.pages.len() > 1;
    let page_of = |id: u32| cim.rows().find(|r| r.region_id == id).map(|r| r.page).unwrap_or(0);

    let mut parts: Vec<Part> = Vec::with_capacity(cim.pages.len() + 2);
    for page in &cim.pages {
        parts.push(Part::Image(page.image.to_png()?));
    }
    let mut text = String::new();
    text.push_str(match answer {
        Some(_) => &ctx.prompts.grounding,
        None => &ctx.prompts.combined,
    });
    if let Some(orig) = original {
        let (png, _) = fit_image(orig, ctx.max_image_dim)?;
        parts.push(Part::Image(png));
        text.push('\n');
        text.push_str(&ctx.prompts.original_image_note);
    }
    text.push_str("\n\nRegions:\n");
    for (id, b) in boxes {
        if paged {
            let _ = writeln!(text, "B{id} {b} (page {})", page_of(*id));
        } else {
            let _ = writeln!(text, "B{id} {b}");
        }
    }
    let _ = write!(text, "\nQuestion: {q}");
    if let Some(a) = answer {
        let _ = write!(text, "\nAnswer: {a}");
    }
    parts.push(Part::Text(text));
    Ok(ctx.request(parts, tag.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constructed::{build_constructed_image, LayoutConfig};
    use crate::geometry::{DetectedRegion, Raster};
    use image::Rgb;

    fn region(id: u32, x: u32, text: &str) -> RecognizedRegion {
        RecognizedRegion {
            region: DetectedRegion {
                region_id: id,
                bbox: BBox::new(x, 10, x + 30, 24).unwrap(),
                crop: Raster::from_pixel(30, 14, Rgb([0, 0, 0])),
            },
            text: text.into(),
        }
    }

    #[test]
    fn ocr_dependent_lists_every_pair() {
        let pairs = [
            region(0, 0, "DEPARTMENT"),
            region(1, 40, "NAME:"),
            region(2, 80, "SCIENCE"),
        ];
        let q = "What is the content in the DEPARTMENT NAME field?";
        let req = prompt_ocr_dependent(&pairs, q, &PromptContext::default(), "t").unwrap();
        let text = req.text();
        assert!(text.contains("B0 [0,10,30,24]: DEPARTMENT"));
        assert!(text.contains("B1 [40,10,70,24]: NAME:"));
        assert!(text.contains("B2 [80,10,110,24]: SCIENCE"));
        assert!(text.contains(q));
        assert_eq!(req.image_parts(), 0);
        let again = prompt_ocr_dependent(&pairs, q, &PromptContext::default(), "t").unwrap();
        assert_eq!(req.wire_body(), again.wire_body());
        assert!(matches!(
            prompt_ocr_dependent(&pairs, "  ", &PromptContext::default(), "t"),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            prompt_ocr_dependent(&[], q, &PromptContext::default(), "t"),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn extraction_sends_one_image() {
        let img = DocumentImage::new("d", Raster::from_pixel(300, 100, Rgb([255, 255, 255]))).unwrap();
        let req = prompt_answer_extraction(&img, "q?", &PromptContext::default(), "d/q/extract").unwrap();
        assert_eq!(req.image_parts(), 1);
        assert_eq!(req.request_tag, "d/q/extract");
        assert!(matches!(
            prompt_answer_extraction(&img, "", &PromptContext::default(), "t"),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn extraction_downscales_large_images() {
        let img = DocumentImage::new("d", Raster::from_pixel(3000, 1000, Rgb([255, 255, 255]))).unwrap();
        let ctx = PromptContext {
            max_image_dim: 1500,
            ..PromptContext::default()
        };
        let req = prompt_answer_extraction(&img, "q?", &ctx, "t").unwrap();
        let Part::Image(png) = &req.user_parts[0] else { panic!() };
        let decoded = image::load_from_memory(png).unwrap();
        assert_eq!((decoded.width(), decoded.height()), (1500, 500));
        assert!(req.request_tag.contains("downscaled=3000x1000->1500x500"));
    }

    fn cim(n: u32, max_h: u32) -> (ConstructedImageMap, Vec<(u32, BBox)>) {
        let regions: Vec<DetectedRegion> = (0..n)
            .map(|i| DetectedRegion {
                region_id: i,
                bbox: BBox::new(0, i * 20, 30, i * 20 + 20).unwrap(),
                crop: Raster::from_pixel(30, 20, Rgb([0, 0, 0])),
            })
            .collect();
        let layout = LayoutConfig {
            max_canvas_height: max_h,
            ..LayoutConfig::default()
        };
        let cim = build_constructed_image("d", &regions, &layout).unwrap();
        let boxes = regions.iter().map(|r| (r.region_id, r.bbox)).collect();
        (cim, boxes)
    }

    #[test]
    fn grounding_parts() {
        let ctx = PromptContext::default();
        let (c, boxes) = cim(4, 8192);
        let req = prompt_grounding(&c, &boxes, "q?", Some("A"), None, &ctx, "t").unwrap();
        assert_eq!(req.image_parts(), 1);
        let text = req.text();
        for i in 0..4 {
            assert!(text.contains(&format!("B{i} [")));
        }
        assert!(text.contains("Answer: A"));
        assert!(!text.contains("(page"));

        let orig = DocumentImage::new("d", Raster::from_pixel(50, 90, Rgb([255, 255, 255]))).unwrap();
        let with = prompt_grounding(&c, &boxes, "q?", Some("A"), Some(&orig), &ctx, "t").unwrap();
        assert_eq!(with.image_parts(), 2);

        let combined = prompt_grounding(&c, &boxes, "q?", None, None, &ctx, "t").unwrap();
        assert!(!combined.text().contains("Answer:"));
        assert!(combined.text().starts_with(&ctx.prompts.combined));

        let (paged, pboxes) = cim(4, 60);
        assert_eq!(paged.pages.len(), 2);
        let req = prompt_grounding(&paged, &pboxes, "q?", Some("A"), None, &ctx, "t").unwrap();
        assert_eq!(req.image_parts(), 2);
        assert!(req.text().contains("B0 [0,0,30,20] (page 0)"));
        assert!(req.text().contains("B3 [0,60,30,80] (page 1)"));

        assert!(matches!(
            prompt_grounding(&c, &boxes[..3], "q?", Some("A"), None, &ctx, "t"),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn wire_body_shape() {
        let img = DocumentImage::new("d", Raster::from_pixel(4, 4, Rgb([255, 255, 255]))).unwrap();
        let req = prompt_answer_extraction(&img, "q?", &PromptContext::default(), "t").unwrap();
        let v: serde_json::Value = serde_json::from_slice(&req.wire_body()).unwrap();
        assert_eq!(v["model"], "pixtral-12b");
        assert_eq!(v["temperature"], 0.0);
        assert_eq!(v["messages"][0]["role"], "system");
        let parts = &v["messages"][1]["content"];
        assert!(parts[0]["image_url"]["url"]
            .as_str()
            .unwrap()
            .starts_with("data:image/png;base64,"));
        assert_eq!(parts[1]["type"], "text");
        let bad = ModelRequest {
            temperature: 2.5,
            ..req.clone()
        };
        assert!(bad.validate().is_err());
        let empty = ModelRequest {
            user_parts: vec![],
            ..req
        };
        assert!(empty.validate().is_err());
    }
}

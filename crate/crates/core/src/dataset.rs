//! Annotation and image pipeline: VOC XML parsing, YOLO txt conversion,
//! flip/photometric augmentation with box propagation, deterministic corpus
//! expansion, train/test splitting, binary PPM codec and letterboxing.

use std::fmt::Write as _;

use thiserror::Error;

use crate::detect::Box;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 4] = ["Dead Knot", "Live Knot", "Knot with crack", "Crack"];

pub fn class_id(name: &str) -> Option<usize> {
    CLASS_NAMES.iter().position(|&c| c == name)
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("malformed XML: {0}")]
    Xml(String),
    #[error("annotation is missing {0}")]
    MissingField(&'static str),
    #[error("unknown class name `{0}`")]
    UnknownClass(String),
    #[error("inverted or out-of-range box ({xmin},{ymin},{xmax},{ymax}) in {width}x{height}")]
    BadBox {
        xmin: f32,
        ymin: f32,
        xmax: f32,
        ymax: f32,
        width: u32,
        height: u32,
    },
    #[error("malformed label line `{0}`")]
    BadLabelLine(String),
    #[error("normalized label field out of [0,1]: {0}")]
    LabelOutOfRange(f32),
    #[error("bad PPM: {0}")]
    BadPpm(String),
    #[error("target total {target} below current corpus size {current}")]
    TargetTooSmall { target: usize, current: usize },
}

type Result<T> = std::result::Result<T, DatasetError>;

/// One ground-truth object in pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct VocObject {
    pub class_name: String,
    pub xmin: f32,
    pub ymin: f32,
    pub xmax: f32,
    pub ymax: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageAnnotation {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub objects: Vec<VocObject>,
}

/// Normalized YOLO label: class id plus center/size as image fractions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YoloLabel {
    pub class_id: usize,
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

/// 8-bit RGB image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>, // RGB interleaved, row major
}

impl Image {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != (width * height * 3) as usize {
            return Err(DatasetError::BadPpm(format!(
                "pixel buffer {} does not match {}x{}x3",
                pixels.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity((width * height * 3) as usize);
        for _ in 0..width * height {
            pixels.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let off = ((y * self.width + x) * 3) as usize;
        [self.pixels[off], self.pixels[off + 1], self.pixels[off + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let off = ((y * self.width + x) * 3) as usize;
        self.pixels[off..off + 3].copy_from_slice(&rgb);
    }
}

fn check_box(o: &VocObject, width: u32, height: u32) -> Result<()> {
    if o.xmin < 0.0
        || o.ymin < 0.0
        || o.xmin >= o.xmax
        || o.ymin >= o.ymax
        || o.xmax > width as f32
        || o.ymax > height as f32
    {
        return Err(DatasetError::BadBox {
            xmin: o.xmin,
            ymin: o.ymin,
            xmax: o.xmax,
            ymax: o.ymax,
            width,
            height,
        });
    }
    Ok(())
}

/// Parse a VOC XML annotation document.
pub fn parse_voc_xml(bytes: &[u8]) -> Result<ImageAnnotation> {
    let text = std::str::from_utf8(bytes).map_err(|e| DatasetError::Xml(e.to_string()))?;
    let doc = roxmltree::Document::parse(text).map_err(|e| DatasetError::Xml(e.to_string()))?;
    let root = doc.root_element();

    let child_text = |node: roxmltree::Node, tag: &str| -> Option<String> {
        node.children()
            .find(|n| n.has_tag_name(tag))
            .and_then(|n| n.text())
            .map(|s| s.trim().to_string())
    };

    let size = root
        .children()
        .find(|n| n.has_tag_name("size"))
        .ok_or(DatasetError::MissingField("size"))?;
    let width: u32 = child_text(size, "width")
        .and_then(|s| s.parse().ok())
        .ok_or(DatasetError::MissingField("size/width"))?;
    let height: u32 = child_text(size, "height")
        .and_then(|s| s.parse().ok())
        .ok_or(DatasetError::MissingField("size/height"))?;
    let id = child_text(root, "filename")
        .map(|f| f.rsplit_once('.').map(|(stem, _)| stem.to_string()).unwrap_or(f))
        .unwrap_or_default();

    let mut objects = Vec::new();
    for node in root.children().filter(|n| n.has_tag_name("object")) {
        let class_name = child_text(node, "name").ok_or(DatasetError::MissingField("object/name"))?;
        if class_id(&class_name).is_none() {
            return Err(DatasetError::UnknownClass(class_name));
        }
        let bnd = node
            .children()
            .find(|n| n.has_tag_name("bndbox"))
            .ok_or(DatasetError::MissingField("object/bndbox"))?;
        let coord = |tag: &'static str| -> Result<f32> {
            child_text(bnd, tag)
                .and_then(|s| s.parse().ok())
                .ok_or(DatasetError::MissingField(tag))
        };
        let obj = VocObject {
            class_name,
            xmin: coord("xmin")?,
            ymin: coord("ymin")?,
            xmax: coord("xmax")?,
            ymax: coord("ymax")?,
        };
        check_box(&obj, width, height)?;
        objects.push(obj);
    }

    Ok(ImageAnnotation {
        id,
        width,
        height,
        objects,
    })
}

pub fn to_yolo_labels(ann: &ImageAnnotation) -> Result<Vec<YoloLabel>> {
    let w = ann.width as f32;
    let h = ann.height as f32;
    ann.objects
        .iter()
        .map(|o| {
            check_box(o, ann.width, ann.height)?;
            let cid = class_id(&o.class_name)
                .ok_or_else(|| DatasetError::UnknownClass(o.class_name.clone()))?;
            Ok(YoloLabel {
                class_id: cid,
                cx: (o.xmin + o.xmax) / (2.0 * w),
                cy: (o.ymin + o.ymax) / (2.0 * h),
                w: (o.xmax - o.xmin) / w,
                h: (o.ymax - o.ymin) / h,
            })
        })
        .collect()
}

/// One line per object: `class_id cx cy w h`, six decimals, fractions of
/// the image dimensions.
pub fn to_yolo_txt(ann: &ImageAnnotation) -> Result<String> {
    let mut s = String::new();
    for l in to_yolo_labels(ann)? {
        let f = crate::format_fixed6;
        writeln!(s, "{} {} {} {} {}", l.class_id, f(l.cx), f(l.cy), f(l.w), f(l.h)).unwrap();
    }
    Ok(s)
}

pub fn parse_yolo_txt(text: &str) -> Result<Vec<YoloLabel>> {
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 5 {
            return Err(DatasetError::BadLabelLine(line.to_string()));
        }
        let class_id: usize = parts[0]
            .parse()
            .map_err(|_| DatasetError::BadLabelLine(line.to_string()))?;
        let vals: Vec<f32> = parts[1..]
            .iter()
            .map(|p| p.parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| DatasetError::BadLabelLine(line.to_string()))?;
        for &v in &vals {
            if !(0.0..=1.0).contains(&v) {
                return Err(DatasetError::LabelOutOfRange(v));
            }
        }
        out.push(YoloLabel {
            class_id,
            cx: vals[0],
            cy: vals[1],
            w: vals[2],
            h: vals[3],
        });
    }
    Ok(out)
}

/// YOLO label back to pixel coordinates.
pub fn yolo_to_voc(label: &YoloLabel, width: u32, height: u32) -> VocObject {
    let w = width as f32;
    let h = height as f32;
    VocObject {
        class_name: CLASS_NAMES
            .get(label.class_id)
            .copied()
            .unwrap_or("Dead Knot")
            .to_string(),
        xmin: (label.cx - label.w / 2.0) * w,
        ymin: (label.cy - label.h / 2.0) * h,
        xmax: (label.cx + label.w / 2.0) * w,
        ymax: (label.cy + label.h / 2.0) * h,
    }
}

/// Horizontal mirror: pixel columns reversed, boxes reflected in x.
pub fn flip_horizontal(img: &Image, ann: &ImageAnnotation) -> (Image, ImageAnnotation) {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            out.set_pixel(img.width - 1 - x, y, img.pixel(x, y));
        }
    }
    let w = img.width as f32;
    let mut flipped = ann.clone();
    for o in &mut flipped.objects {
        let (xmin, xmax) = (w - o.xmax, w - o.xmin);
        o.xmin = xmin;
        o.xmax = xmax;
    }
    (out, flipped)
}

/// Photometric jitter: pixel' = clamp(round(alpha*pixel + beta), 0, 255).
/// Annotations are unaffected by photometric changes.
pub fn adjust_brightness_contrast(img: &Image, alpha: f32, beta: f32) -> Image {
    let pixels = img
        .pixels
        .iter()
        .map(|&p| (alpha * p as f32 + beta).round().clamp(0.0, 255.0) as u8)
        .collect();
    Image {
        width: img.width,
        height: img.height,
        pixels,
    }
}

/// One corpus item: image plus its pixel-space annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct DataItem {
    pub image: Image,
    pub ann: ImageAnnotation,
}

/// Expand the corpus to exactly `target_total` items by repeatedly picking a
/// source uniformly and applying flip (p=0.5) and/or brightness-contrast
/// jitter (p=0.5, alpha in [0.8,1.2], beta in [-30,30]); when neither fires
/// a flip is forced. Deterministic for a given seed.
pub fn expand_dataset(corpus: &[DataItem], target_total: usize, seed: u64) -> Result<Vec<DataItem>> {
    if target_total < corpus.len() {
        return Err(DatasetError::TargetTooSmall {
            target: target_total,
            current: corpus.len(),
        });
    }
    let mut rng = SplitMix64::new(seed);
    let mut out: Vec<DataItem> = corpus.to_vec();
    let mut counter = 0usize;
    while out.len() < target_total {
        let src = &corpus[rng.below(corpus.len())];
        let do_flip = rng.coin();
        let do_bc = rng.coin();
        let (mut image, mut ann) = if do_flip || !do_bc {
            flip_horizontal(&src.image, &src.ann)
        } else {
            (src.image.clone(), src.ann.clone())
        };
        if do_bc {
            let alpha = rng.uniform(0.8, 1.2) as f32;
            let beta = rng.uniform(-30.0, 30.0) as f32;
            image = adjust_brightness_contrast(&image, alpha, beta);
        }
        ann.id = format!("{}_aug{}", src.ann.id, counter);
        counter += 1;
        out.push(DataItem { image, ann });
    }
    Ok(out)
}

/// Deterministic Fisher-Yates partition into train/test stem lists.
pub fn split(ids: &[String], ratio: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    let mut rng = SplitMix64::new(seed);
    for i in (1..order.len()).rev() {
        order.swap(i, rng.below(i + 1));
    }
    let n_train = (ratio * ids.len() as f64).round() as usize;
    let n_train = n_train.min(ids.len());
    let train = order[..n_train].iter().map(|&i| ids[i].clone()).collect();
    let test = order[n_train..].iter().map(|&i| ids[i].clone()).collect();
    (train, test)
}

/// Binary PPM (P6), maxval 255 only.
pub fn write_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn read_ppm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        // skip whitespace and # comments
        while pos < bytes.len() {
            let b = bytes[pos];
            if b == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                pos += 1;
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(DatasetError::BadPpm("truncated header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    let magic = token()?;
    if magic != "P6" {
        return Err(DatasetError::BadPpm(format!("magic `{magic}`, expected P6")));
    }
    let width: u32 = token()?
        .parse()
        .map_err(|_| DatasetError::BadPpm("bad width".into()))?;
    let height: u32 = token()?
        .parse()
        .map_err(|_| DatasetError::BadPpm("bad height".into()))?;
    let maxval: u32 = token()?
        .parse()
        .map_err(|_| DatasetError::BadPpm("bad maxval".into()))?;
    if maxval != 255 {
        return Err(DatasetError::BadPpm(format!("maxval {maxval} unsupported")));
    }
    // exactly one whitespace byte separates header from pixel data
    pos += 1;
    let need = (width * height * 3) as usize;
    if bytes.len() < pos + need {
        return Err(DatasetError::BadPpm(format!(
            "pixel data short: need {need}, have {}",
            bytes.len().saturating_sub(pos)
        )));
    }
    Image::new(width, height, bytes[pos..pos + need].to_vec())
}

/// Letterbox result: the network input tensor plus the parameters needed to
/// project boxes back to the source image.
#[derive(Debug, Clone)]
pub struct Letterbox {
    pub tensor: Tensor,
    pub scale: f32,
    pub pad_x: u32,
    pub pad_y: u32,
    pub src_width: u32,
    pub src_height: u32,
}

/// Aspect-preserving nearest-neighbor resize onto a square gray canvas
/// (value 114), normalized to [0,1] NCHW.
pub fn letterbox(img: &Image, target: u32) -> Letterbox {
    let scale = (target as f32 / img.width as f32).min(target as f32 / img.height as f32);
    let new_w = ((img.width as f32 * scale).round() as u32).clamp(1, target);
    let new_h = ((img.height as f32 * scale).round() as u32).clamp(1, target);
    let pad_x = (target - new_w) / 2;
    let pad_y = (target - new_h) / 2;

    let gray = 114.0 / 255.0;
    let t = target as usize;
    let mut data = vec![gray; 3 * t * t];
    for y in 0..new_h {
        let sy = (((y as f32) / scale) as u32).min(img.height - 1);
        for x in 0..new_w {
            let sx = (((x as f32) / scale) as u32).min(img.width - 1);
            let rgb = img.pixel(sx, sy);
            let dy = (y + pad_y) as usize;
            let dx = (x + pad_x) as usize;
            for ch in 0..3 {
                data[(ch * t + dy) * t + dx] = rgb[ch] as f32 / 255.0;
            }
        }
    }
    Letterbox {
        tensor: Tensor::new(1, 3, t, t, data).expect("letterbox dims"),
        scale,
        pad_x,
        pad_y,
        src_width: img.width,
        src_height: img.height,
    }
}

impl Letterbox {
    /// Map a box on the padded canvas back into source-image pixels,
    /// clipped to the image bounds.
    pub fn unproject(&self, b: &Box) -> Box {
        let w = self.src_width as f32;
        let h = self.src_height as f32;
        Box {
            x1: ((b.x1 - self.pad_x as f32) / self.scale).clamp(0.0, w),
            y1: ((b.y1 - self.pad_y as f32) / self.scale).clamp(0.0, h),
            x2: ((b.x2 - self.pad_x as f32) / self.scale).clamp(0.0, w),
            y2: ((b.y2 - self.pad_y as f32) / self.scale).clamp(0.0, h),
        }
    }
}

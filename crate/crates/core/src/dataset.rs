//! Synthetic shape scenes, COCO-style annotation I/O, and PPM/PGM images.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::roi_align::{roi_taps, RoiConfig};
use crate::tensor::Tensor;

pub const SHAPE_NAMES: [&str; 3] = ["rectangle", "disc", "triangle"];

/// Full-image binary mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Tight half-open pixel box, `None` for an empty mask.
    pub fn bbox(&self) -> Option<BBox> {
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    x1 = x1.min(x);
                    y1 = y1.min(y);
                    x2 = x2.max(x + 1);
                    y2 = y2.max(y + 1);
                }
            }
        }
        (x1 != usize::MAX).then(|| BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64))
    }

    pub fn iou(&self, other: &Mask) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (a, b) in self.data.iter().zip(&other.data) {
            let (a, b) = (*a != 0, *b != 0);
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Crops `region`, resamples to `out_h × out_w` by bilinear averaging and
    /// binarises at 0.5.
    pub fn crop_resample(&self, region: &BBox, out_h: usize, out_w: usize) -> Result<Vec<f64>> {
        let cfg = RoiConfig {
            output_size: (out_h, out_w),
            sampling_ratio: 2,
        };
        let taps = roi_taps(region, 1, self.height, self.width, &cfg)?;
        Ok(taps
            .iter()
            .map(|t| {
                let v: f64 = t.iter().map(|&(i, w)| w * self.data[i] as f64).sum();
                if v >= 0.5 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect())
    }

    /// COCO uncompressed RLE: run lengths in column-major order, starting with zeros.
    pub fn to_rle(&self) -> Rle {
        let mut counts = Vec::new();
        let mut current = 0u8;
        let mut run = 0u32;
        for x in 0..self.width {
            for y in 0..self.height {
                let v = self.data[y * self.width + x].min(1);
                if v != current {
                    counts.push(run);
                    run = 0;
                    current = v;
                }
                run += 1;
            }
        }
        counts.push(run);
        Rle {
            size: [self.height, self.width],
            counts,
        }
    }

    pub fn from_rle(rle: &Rle) -> Result<Self> {
        let [h, w] = rle.size;
        let total: usize = rle.counts.iter().map(|&c| c as usize).sum();
        if total != h * w {
            return Err(Error::Format(format!("RLE covers {total} pixels, mask has {}", h * w)));
        }
        let mut m = Mask::new(w, h);
        let mut pos = 0usize;
        for (i, &c) in rle.counts.iter().enumerate() {
            for p in pos..pos + c as usize {
                if i % 2 == 1 {
                    m.data[(p % h) * w + p / h] = 1;
                }
            }
            pos += c as usize;
        }
        Ok(m)
    }

    /// Rasterises polygons (even-odd rule at pixel centres).
    pub fn from_polygons(polys: &[Vec<f64>], width: usize, height: usize) -> Result<Self> {
        let mut m = Mask::new(width, height);
        for poly in polys {
            if poly.len() < 6 || poly.len() % 2 != 0 {
                return Err(Error::Format("polygon needs at least 3 (x, y) pairs".into()));
            }
            let pts: Vec<(f64, f64)> = poly.chunks_exact(2).map(|c| (c[0], c[1])).collect();
            for y in 0..height {
                for x in 0..width {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut inside = false;
                    let mut j = pts.len() - 1;
                    for i in 0..pts.len() {
                        let (xi, yi) = pts[i];
                        let (xj, yj) = pts[j];
                        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
                            inside = !inside;
                        }
                        j = i;
                    }
                    if inside {
                        m.set(x, y, true);
                    }
                }
            }
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    /// `[height, width]`
    pub size: [usize; 2],
    pub counts: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub bbox: BBox,
    /// Zero-based class index.
    pub class: usize,
    pub mask: Mask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub file_name: String,
    /// `3×H×W`, values in [0, 1].
    pub image: Tensor,
    pub instances: Vec<Instance>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub image_size: usize,
    pub category_names: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.category_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Dataset with the listed samples (cloned), same metadata.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            image_size: self.image_size,
            category_names: self.category_names.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

fn rasterize_shape(kind: usize, x0: f64, y0: f64, w: f64, h: f64, size: usize) -> Mask {
    let mut m = Mask::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (u, v) = ((px - x0) / w, (py - y0) / h);
            let inside = match kind {
                0 => (0.0..1.0).contains(&u) && (0.0..1.0).contains(&v),
                1 => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
                _ => (0.0..1.0).contains(&v) && (u - 0.5).abs() <= 0.5 * v,
            };
            if inside {
                m.set(x, y, true);
            }
        }
    }
    m
}

/// `n` noisy scenes with 1–4 non-overlapping shapes each. Classes follow
/// [`SHAPE_NAMES`] (only the first `num_classes` kinds are used). Pixel values
/// are multiples of 1/255 so they survive an 8-bit round trip.
pub fn synth_generate(n: usize, image_size: usize, num_classes: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be positive".into()));
    }
    if num_classes == 0 || num_classes > SHAPE_NAMES.len() {
        return Err(Error::InvalidArgument(format!(
            "num_classes must be in 1..={}",
            SHAPE_NAMES.len()
        )));
    }
    if image_size < 16 {
        return Err(Error::InvalidArgument("image size must be at least 16".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = image_size;
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    let max_side = (s as f64 * 0.5).max(8.0);
    let mut samples = Vec::with_capacity(n);
    for idx in 0..n {
        let bg = rng.gen_range(0.15..0.55);
        let mut img = vec![0.0; 3 * s * s];
        for c in 0..3 {
            let tint = bg + rng.gen_range(-0.05..0.05);
            for p in 0..s * s {
                img[c * s * s + p] = tint + rng.gen_range(-0.08..0.08);
            }
        }
        let want = rng.gen_range(1..=4);
        let mut instances: Vec<Instance> = Vec::new();
        let mut tries = 0;
        while instances.len() < want && tries < 100 {
            tries += 1;
            let kind = rng.gen_range(0..num_classes);
            let w = rng.gen_range(8.0..max_side).round();
            let h = if kind == 1 { w } else { rng.gen_range(8.0..max_side).round() };
            let x0 = rng.gen_range(0.0..(s as f64 - w)).round();
            let y0 = rng.gen_range(0.0..(s as f64 - h)).round();
            let mask = rasterize_shape(kind, x0, y0, w, h, s);
            let Some(bbox) = mask.bbox() else { continue };
            let padded = BBox::new(bbox.x1 - 1.0, bbox.y1 - 1.0, bbox.x2 + 1.0, bbox.y2 + 1.0);
            if instances.iter().any(|o| o.bbox.intersection(&padded) > 0.0) {
                continue;
            }
            let bright = bg < 0.35;
            let color: [f64; 3] = std::array::from_fn(|_| {
                if bright {
                    rng.gen_range(0.6..1.0)
                } else {
                    rng.gen_range(0.0..0.6)
                }
            });
            let color = if color.iter().sum::<f64>() / 3.0 - bg < 0.25 && bright {
                [1.0, color[1], color[2]]
            } else {
                color
            };
            for y in 0..s {
                for x in 0..s {
                    if mask.get(x, y) {
                        for (c, &cv) in color.iter().enumerate() {
                            img[c * s * s + y * s + x] = cv + rng.gen_range(-0.03..0.03);
                        }
                    }
                }
            }
            instances.push(Instance {
                bbox,
                class: kind,
                mask,
            });
        }
        let image = Tensor::new(vec![3, s, s], img.into_iter().map(q).collect())?;
        samples.push(Sample {
            id: idx as u64 + 1,
            file_name: format!("{idx:06}.ppm"),
            image,
            instances,
        });
    }
    Ok(Dataset {
        image_size,
        category_names: SHAPE_NAMES[..num_classes].iter().map(|s| s.to_string()).collect(),
        samples,
    })
}

// ---------------------------------------------------------------------------
// images

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::InvalidArgument(format!("PPM needs a 3×H×W image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for p in 0..h * w {
        for c in 0..3 {
            buf.push((d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::InvalidArgument("PGM pixel count mismatch".into()));
    }
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(pixels)?;
    Ok(())
}

/// Parses a binary PNM header; returns (magic, width, height, payload offset).
fn pnm_header(bytes: &[u8]) -> Result<(String, usize, usize, usize)> {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::Format("truncated PNM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).to_string());
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PNM field `{s}`")));
    if num(&fields[3])? != 255 {
        return Err(Error::Format("only 8-bit PNM is supported".into()));
    }
    Ok((fields[0].clone(), num(&fields[1])?, num(&fields[2])?, i + 1))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let (magic, w, h, off) = pnm_header(&bytes)?;
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        m => return Err(Error::Format(format!("unsupported PNM type {m}"))),
    };
    let payload = bytes
        .get(off..off + w * h * channels)
        .ok_or_else(|| Error::Format("truncated PNM payload".into()))?;
    let mut data = vec![0.0; 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            let src = if channels == 3 { payload[p * 3 + c] } else { payload[p] };
            data[c * h * w + p] = src as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Reads a P5 file into (width, height, pixels).
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let (magic, w, h, off) = pnm_header(&bytes)?;
    if magic != "P5" {
        return Err(Error::Format(format!("expected P5, got {magic}")));
    }
    let payload = bytes
        .get(off..off + w * h)
        .ok_or_else(|| Error::Format("truncated PGM payload".into()))?;
    Ok((w, h, payload.to_vec()))
}

// ---------------------------------------------------------------------------
// COCO JSON

#[derive(Debug, Serialize, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: usize,
    height: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    #[serde(default)]
    area: f64,
    #[serde(default)]
    iscrowd: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    segmentation: Option<Segmentation>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Segmentation {
    Rle(Rle),
    Polygons(Vec<Vec<f64>>),
}

impl Segmentation {
    pub fn to_mask(&self, width: usize, height: usize) -> Result<Mask> {
        match self {
            Segmentation::Rle(r) => {
                if r.size != [height, width] {
                    return Err(Error::Format(format!(
                        "RLE size {:?} does not match image {height}×{width}",
                        r.size
                    )));
                }
                Mask::from_rle(r)
            }
            Segmentation::Polygons(p) => Mask::from_polygons(p, width, height),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

/// Writes the annotation JSON at `path` and one PPM per image next to it.
pub fn coco_write(dataset: &Dataset, path: &Path) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let mut next_id = 1;
    let mut file = CocoFile {
        images: Vec::new(),
        annotations: Vec::new(),
        categories: dataset
            .category_names
            .iter()
            .enumerate()
            .map(|(i, n)| CocoCategory {
                id: i as u64 + 1,
                name: n.clone(),
            })
            .collect(),
    };
    for s in &dataset.samples {
        let sh = s.image.shape();
        file.images.push(CocoImage {
            id: s.id,
            file_name: s.file_name.clone(),
            width: sh[2],
            height: sh[1],
        });
        write_ppm(&dir.join(&s.file_name), &s.image)?;
        for inst in &s.instances {
            file.annotations.push(CocoAnnotation {
                id: next_id,
                image_id: s.id,
                category_id: inst.class as u64 + 1,
                bbox: inst.bbox.to_xywh(),
                area: inst.mask.area() as f64,
                iscrowd: 0,
                segmentation: Some(Segmentation::Rle(inst.mask.to_rle())),
            });
            next_id += 1;
        }
    }
    fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

/// Reads annotations and the referenced images (resolved next to `path`).
pub fn coco_read(path: &Path) -> Result<Dataset> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let file: CocoFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    let mut cats: Vec<&CocoCategory> = file.categories.iter().collect();
    cats.sort_by_key(|c| c.id);
    let cat_index: BTreeMap<u64, usize> = cats.iter().enumerate().map(|(i, c)| (c.id, i)).collect();
    let mut samples = Vec::with_capacity(file.images.len());
    let mut index = BTreeMap::new();
    let mut image_size = 0;
    for im in &file.images {
        if im.width != im.height {
            return Err(Error::Format(format!("image {} is not square", im.id)));
        }
        image_size = im.width;
        let image = read_ppm(&dir.join(&im.file_name))?;
        if image.shape() != [3, im.height, im.width] {
            return Err(Error::Format(format!("{} does not match its declared size", im.file_name)));
        }
        index.insert(im.id, samples.len());
        samples.push(Sample {
            id: im.id,
            file_name: im.file_name.clone(),
            image,
            instances: Vec::new(),
        });
    }
    for a in &file.annotations {
        let class = *cat_index
            .get(&a.category_id)
            .ok_or_else(|| Error::Format(format!("unknown category {}", a.category_id)))?;
        let &si = index
            .get(&a.image_id)
            .ok_or_else(|| Error::Format(format!("annotation {} references unknown image", a.id)))?;
        let (w, h) = (file.images[si].width, file.images[si].height);
        let bbox = BBox::from_xywh(a.bbox);
        let mask = match &a.segmentation {
            Some(seg) => seg.to_mask(w, h)?,
            None => {
                // box-only annotation: use the box as a mask
                let mut m = Mask::new(w, h);
                for y in 0..h {
                    for x in 0..w {
                        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                        m.set(x, y, px >= bbox.x1 && px < bbox.x2 && py >= bbox.y1 && py < bbox.y2);
                    }
                }
                m
            }
        };
        samples[si].instances.push(Instance { bbox, class, mask });
    }
    Ok(Dataset {
        image_size,
        category_names: cats.iter().map(|c| c.name.clone()).collect(),
        samples,
    })
}

/// One entry of a detection results file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, w, h]`
    pub bbox: [f64; 4],
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<Rle>,
}

pub fn write_detections(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(records)?)?;
    Ok(())
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_contract() {
        let d = synth_generate(40, 64, 3, 5).unwrap();
        assert_eq!(d.len(), 40);
        for s in &d.samples {
            assert!((1..=4).contains(&s.instances.len()));
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            for inst in &s.instances {
                assert!(inst.mask.area() > 0);
                assert!(inst.class < 3);
                let tight = inst.mask.bbox().unwrap();
                assert_eq!(tight, inst.bbox);
                assert!(inst.bbox.x2 <= 64.0 && inst.bbox.y2 <= 64.0);
                assert!(inst.bbox.width() >= 4.0 && inst.bbox.height() >= 4.0);
            }
        }
        assert!(synth_generate(0, 64, 3, 5).is_err());
    }

    #[test]
    fn generator_is_deterministic() {
        assert_eq!(synth_generate(5, 64, 3, 9).unwrap(), synth_generate(5, 64, 3, 9).unwrap());
        assert_ne!(synth_generate(5, 64, 3, 9).unwrap(), synth_generate(5, 64, 3, 10).unwrap());
    }

    #[test]
    fn class_histogram_is_roughly_uniform() {
        let d = synth_generate(600, 64, 3, 1).unwrap();
        let mut counts = [0f64; 3];
        for s in &d.samples {
            for i in &s.instances {
                counts[i.class] += 1.0;
            }
        }
        let total: f64 = counts.iter().sum();
        let expected = total / 3.0;
        let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        // 2 degrees of freedom, p = 0.001
        assert!(chi2 < 13.8, "chi2 = {chi2}, counts {counts:?}");
    }

    #[test]
    fn rle_round_trip() {
        let d = synth_generate(10, 64, 3, 2).unwrap();
        for s in &d.samples {
            for i in &s.instances {
                assert_eq!(Mask::from_rle(&i.mask.to_rle()).unwrap(), i.mask);
            }
        }
        let mut m = Mask::new(3, 2);
        m.set(0, 1, true);
        m.set(1, 0, true);
        // column-major: (0,0)=0 (0,1)=1 (1,0)=1 (1,1)=0 (2,*)=0
        assert_eq!(m.to_rle().counts, vec![1, 2, 3]);
    }

    #[test]
    fn polygon_rasterisation() {
        let m = Mask::from_polygons(&[vec![2.0, 2.0, 6.0, 2.0, 6.0, 5.0, 2.0, 5.0]], 8, 8).unwrap();
        assert_eq!(m.area(), 12);
        assert_eq!(m.bbox().unwrap(), BBox::new(2.0, 2.0, 6.0, 5.0));
    }

    #[test]
    fn mask_iou_cases() {
        let mut a = Mask::new(8, 8);
        let mut b = Mask::new(8, 8);
        for y in 0..4 {
            for x in 0..4 {
                a.set(x, y, true);
                b.set(x + 2, y, true);
            }
        }
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(a.iou(&a), 1.0);
        let mut c = Mask::new(8, 8);
        c.set(7, 7, true);
        assert_eq!(a.iou(&c), 0.0);
    }

    #[test]
    fn crop_of_full_mask_is_ones() {
        let mut m = Mask::new(16, 16);
        m.data.fill(1);
        let t = m.crop_resample(&BBox::new(2.0, 3.0, 11.0, 9.0), 8, 8).unwrap();
        assert!(t.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn xywh_conversion() {
        let b = BBox::new(2.0, 3.0, 5.0, 7.0);
        assert_eq!(b.to_xywh(), [2.0, 3.0, 3.0, 4.0]);
        assert_eq!(BBox::from_xywh([2.0, 3.0, 3.0, 4.0]), b);
    }

    #[test]
    fn coco_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.json");
        let d = synth_generate(6, 64, 3, 4).unwrap();
        coco_write(&d, &path).unwrap();
        let back = coco_read(&path).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn coco_empty_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.json");
        let empty = Dataset {
            image_size: 64,
            category_names: vec!["rectangle".into()],
            samples: vec![],
        };
        coco_write(&empty, &path).unwrap();
        let back = coco_read(&path).unwrap();
        assert!(back.is_empty());

        fs::write(&path, "{ not json").unwrap();
        assert!(coco_read(&path).is_err());

        let d = synth_generate(1, 64, 3, 4).unwrap();
        coco_write(&d, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap().replace("\"category_id\":", "\"category_id\":9");
        fs::write(&path, text).unwrap();
        assert!(matches!(coco_read(&path), Err(Error::Format(_))));
    }

    #[test]
    fn ppm_round_trip_is_exact_for_generated_images() {
        let dir = tempfile::tempdir().unwrap();
        let d = synth_generate(2, 32, 2, 1).unwrap();
        let p = dir.path().join("a.ppm");
        write_ppm(&p, &d.samples[0].image).unwrap();
        assert_eq!(read_ppm(&p).unwrap(), d.samples[0].image);
    }
}

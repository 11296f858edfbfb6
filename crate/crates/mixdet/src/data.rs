//! Synthetic multi-object scene generation and the on-disk dataset format.
//!
//! Dataset layout: `images/<image_id>.png`, `annotations/<image_id>.txt`,
//! and `manifest.txt` listing ids. Each annotation file holds the image id
//! on the first line followed by one `class_id l t r b` record per object.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Synthetic image plus ground-truth annotations. Pixel values live on the
/// 8-bit grid (k/255) so PNG round trips are bit-exact.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image_id: String,
    /// `[h, w, 3]`, values in [0, 1].
    pub image: Tensor<f64>,
    /// Foreground classes only; boxes lie within image bounds.
    pub annotations: Vec<BBox<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DataGenConfig {
    pub image_size: usize,
    /// Number of shape classes: 0 rectangle, 1 disc, 2 triangle.
    pub classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub color_jitter: f64,
    pub background_noise: f64,
    pub seed: u64,
}

impl Default for DataGenConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            classes: 3,
            min_objects: 1,
            max_objects: 5,
            min_size: 10.0,
            max_size: 26.0,
            color_jitter: 0.12,
            background_noise: 0.08,
            seed: 0,
        }
    }
}

impl DataGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_objects > self.max_objects {
            return Err(Error::Config("min_objects must not exceed max_objects".into()));
        }
        if self.max_size >= self.image_size as f64 {
            return Err(Error::Config("max_size must fit inside the image".into()));
        }
        if self.classes == 0 || self.classes > 3 {
            return Err(Error::Config("classes must be 1..=3 (shape kinds)".into()));
        }
        Ok(())
    }
}

const BASE_COLORS: [[f64; 3]; 3] = [
    [0.85, 0.25, 0.25], // rectangle
    [0.25, 0.8, 0.3],   // disc
    [0.3, 0.35, 0.9],   // triangle
];

/// splitmix64; used to derive independent per-scene seeds from the master
/// seed so generation can be distributed or replayed per scene.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9e3779b97f4a7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

pub fn generate_scene(config: &DataGenConfig, image_id: String, rng: &mut ChaCha8Rng) -> Scene {
    let n = config.image_size;
    let mut pixels = vec![0.0f64; n * n * 3];
    for y in 0..n {
        for x in 0..n {
            let base = 0.5 + rng.random_range(-config.background_noise..=config.background_noise);
            for c in 0..3 {
                pixels[(y * n + x) * 3 + c] =
                    (base + rng.random_range(-config.background_noise..=config.background_noise))
                        .clamp(0.0, 1.0);
            }
        }
    }

    let count = rng.random_range(config.min_objects..=config.max_objects);
    let mut annotations = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.random_range(0..config.classes);
        let w = rng.random_range(config.min_size..=config.max_size);
        let h = rng.random_range(config.min_size..=config.max_size);
        let l = rng.random_range(0.0..(n as f64 - w));
        let t = rng.random_range(0.0..(n as f64 - h));
        let color: [f64; 3] = std::array::from_fn(|c| {
            (BASE_COLORS[class][c] + rng.random_range(-config.color_jitter..=config.color_jitter))
                .clamp(0.0, 1.0)
        });

        // Rasterize by pixel-center test and record the tight bounds of the
        // pixels actually touched.
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for y in t.floor() as usize..(t + h).ceil() as usize {
            for x in l.floor() as usize..(l + w).ceil() as usize {
                if y >= n || x >= n {
                    continue;
                }
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if !inside_shape(class, px, py, l, t, w, h) {
                    continue;
                }
                for c in 0..3 {
                    pixels[(y * n + x) * 3 + c] = color[c];
                }
                bounds = Some(match bounds {
                    None => (x, y, x, y),
                    Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                });
            }
        }
        if let Some((x0, y0, x1, y1)) = bounds {
            annotations.push(
                BBox::new(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64)
                    .with_class(class),
            );
        }
    }

    // Snap to the 8-bit grid so the PNG round trip is lossless.
    for v in pixels.iter_mut() {
        *v = (*v * 255.0).round() / 255.0;
    }

    Scene { image_id, image: Tensor::from_vec(vec![n, n, 3], pixels), annotations }
}

fn inside_shape(class: usize, px: f64, py: f64, l: f64, t: f64, w: f64, h: f64) -> bool {
    match class {
        0 => px >= l && px <= l + w && py >= t && py <= t + h,
        1 => {
            let (cx, cy) = (l + w / 2.0, t + h / 2.0);
            let (rx, ry) = (w / 2.0, h / 2.0);
            let (dx, dy) = ((px - cx) / rx, (py - cy) / ry);
            dx * dx + dy * dy <= 1.0
        }
        2 => {
            // Upward triangle: apex at the top edge midpoint.
            let apex = (l + w / 2.0, t);
            let left = (l, t + h);
            let right = (l + w, t + h);
            point_in_triangle((px, py), apex, left, right)
        }
        _ => unreachable!("unknown shape class"),
    }
}

fn point_in_triangle(p: (f64, f64), a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> bool {
    let sign = |p1: (f64, f64), p2: (f64, f64), p3: (f64, f64)| {
        (p1.0 - p3.0) * (p2.1 - p3.1) - (p2.0 - p3.0) * (p1.1 - p3.1)
    };
    let d1 = sign(p, a, b);
    let d2 = sign(p, b, c);
    let d3 = sign(p, c, a);
    let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(has_neg && has_pos)
}

/// Generate `count` scenes with per-scene seeds derived from the master.
pub fn generate_dataset(config: &DataGenConfig, count: usize, id_prefix: &str) -> Vec<Scene> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, i as u64));
            generate_scene(config, format!("{id_prefix}{i:06}"), &mut rng)
        })
        .collect()
}

pub fn save_dataset(scenes: &[Scene], dir: &Path) -> Result<()> {
    let images = dir.join("images");
    let annotations = dir.join("annotations");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    fs::create_dir_all(&annotations).map_err(|e| Error::io(&annotations, e))?;

    let mut manifest = String::new();
    for scene in scenes {
        manifest.push_str(&scene.image_id);
        manifest.push('\n');

        let (h, w) = (scene.image.shape()[0], scene.image.shape()[1]);
        let bytes: Vec<u8> =
            scene.image.data().iter().map(|&v| (v * 255.0).round() as u8).collect();
        let img_path = images.join(format!("{}.png", scene.image_id));
        image::save_buffer(&img_path, &bytes, w as u32, h as u32, image::ColorType::Rgb8)
            .map_err(|e| Error::Image { path: img_path.display().to_string(), msg: e.to_string() })?;

        let mut ann = format!("{}\n", scene.image_id);
        for b in &scene.annotations {
            ann.push_str(&format!(
                "{} {} {} {} {}\n",
                b.class_id.expect("annotation must carry a class"),
                b.l, b.t, b.r, b.b
            ));
        }
        let ann_path = annotations.join(format!("{}.txt", scene.image_id));
        fs::write(&ann_path, ann).map_err(|e| Error::io(&ann_path, e))?;
    }
    let manifest_path = dir.join("manifest.txt");
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Scene>> {
    let manifest_path = dir.join("manifest.txt");
    if !manifest_path.exists() {
        eprintln!("warning: {} has no manifest; treating as empty dataset", dir.display());
        return Ok(Vec::new());
    }
    let manifest =
        fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut scenes = Vec::new();
    for id in manifest.lines().filter(|l| !l.trim().is_empty()) {
        scenes.push(load_scene(dir, id)?);
    }
    Ok(scenes)
}

pub fn load_image(path: &Path) -> Result<Tensor<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Image { path: path.display().to_string(), msg: e.to_string() })?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Ok(Tensor::from_vec(vec![h, w, 3], data))
}

fn load_scene(dir: &Path, id: &str) -> Result<Scene> {
    let image = load_image(&dir.join("images").join(format!("{id}.png")))?;

    let ann_path = dir.join("annotations").join(format!("{id}.txt"));
    let text = fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let parse_err = |line: usize, msg: &str| Error::Parse {
        path: ann_path.display().to_string(),
        line,
        msg: msg.into(),
    };

    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty annotation file"))?;
    if header.trim() != id {
        return Err(parse_err(1, "annotation header does not match image id"));
    }
    let mut annotations = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(parse_err(idx + 1, "expected `class_id l t r b`"));
        }
        let class: usize =
            fields[0].parse().map_err(|_| parse_err(idx + 1, "bad class id"))?;
        let mut coords = [0.0f64; 4];
        for (i, f) in fields[1..].iter().enumerate() {
            coords[i] = f.parse().map_err(|_| parse_err(idx + 1, "bad coordinate"))?;
        }
        annotations
            .push(BBox::new(coords[0], coords[1], coords[2], coords[3]).with_class(class));
    }
    Ok(Scene { image_id: id.to_string(), image, annotations })
}

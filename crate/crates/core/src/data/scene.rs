use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::text::ClassSplit;

/// Label value excluded from every loss and metric.
pub const IGNORE: u16 = u16::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Background,
    Disk,
    Square,
    Triangle,
    Ring,
    /// Square region filled with horizontal stripes.
    Stripes,
    /// Square region filled with a checkerboard.
    Checker,
}

impl ShapeKind {
    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Background => "background",
            ShapeKind::Disk => "disk",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Ring => "ring",
            ShapeKind::Stripes => "stripes",
            ShapeKind::Checker => "checker",
        }
    }

    /// Whether pixel `(dy, dx)` relative to the center lies inside a shape
    /// of radius `r`. Coordinates are pixel centers.
    pub fn contains(self, dy: f64, dx: f64, r: f64) -> bool {
        match self {
            ShapeKind::Background => true,
            ShapeKind::Disk => dx * dx + dy * dy <= r * r,
            ShapeKind::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (0.5 * r).powi(2)
            }
            ShapeKind::Square | ShapeKind::Stripes | ShapeKind::Checker => {
                dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r
            }
            ShapeKind::Triangle => {
                // Apex up, base at dy = r.
                let t = (dy + r) / (2.0 * r);
                (0.0..=1.0).contains(&t) && dx.abs() <= t * r
            }
        }
    }

    /// Shade multiplier for textured kinds at absolute pixel `(y, x)`.
    fn shade(self, y: usize, x: usize) -> f64 {
        match self {
            ShapeKind::Stripes if (y / 2) % 2 == 1 => 0.25,
            ShapeKind::Checker if ((y / 2) + (x / 2)) % 2 == 1 => 0.25,
            _ => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub shape: ShapeKind,
    pub color: [f64; 3],
}

pub fn named_color(name: &str) -> Option<[f64; 3]> {
    Some(match name {
        "red" => [0.9, 0.15, 0.15],
        "green" => [0.15, 0.8, 0.2],
        "blue" => [0.15, 0.25, 0.95],
        "yellow" => [0.95, 0.9, 0.15],
        "magenta" => [0.9, 0.2, 0.85],
        "cyan" => [0.15, 0.85, 0.9],
        "orange" => [0.95, 0.55, 0.1],
        "white" => [0.95, 0.95, 0.95],
        "gray" => [0.45, 0.45, 0.45],
        _ => return None,
    })
}

impl ClassSpec {
    /// `"<color> <shape>"` class, e.g. `ClassSpec::object("red", ShapeKind::Disk)`.
    pub fn object(color: &str, shape: ShapeKind) -> Result<Self> {
        let rgb = named_color(color).ok_or_else(|| Error::invalid(format!("unknown color {color}")))?;
        Ok(ClassSpec {
            name: format!("{color} {}", shape.word()),
            shape,
            color: rgb,
        })
    }

    pub fn background() -> Self {
        ClassSpec {
            name: "background".into(),
            shape: ShapeKind::Background,
            color: [0.45, 0.45, 0.45],
        }
    }
}

/// Generator settings. Class 0 is the background and is always seen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub classes: Vec<ClassSpec>,
    pub seen: Vec<bool>,
    pub canvas: usize,
    pub objects: (usize, usize),
    pub radius: (f64, f64),
    pub noise: f64,
    pub seed: u64,
}

impl SceneConfig {
    /// Builds a config from `(color, shape, seen)` triples plus background.
    pub fn from_objects(
        objects: &[(&str, ShapeKind, bool)],
        canvas: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut classes = vec![ClassSpec::background()];
        let mut seen = vec![true];
        for &(color, shape, s) in objects {
            classes.push(ClassSpec::object(color, shape)?);
            seen.push(s);
        }
        let cfg = SceneConfig {
            classes,
            seen,
            canvas,
            objects: (1, 3),
            radius: (canvas as f64 * 0.14, canvas as f64 * 0.26),
            noise: 0.04,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Four colors crossed with three surface kinds (solid disk, stripes,
    /// checker). Nine combinations are seen; the three unseen ones each
    /// pair a seen color with a seen kind. 32-pixel canvas.
    pub fn benchmark(seed: u64) -> Self {
        Self::benchmark_with_canvas(seed, 32).expect("benchmark config is valid")
    }

    /// [`SceneConfig::benchmark`] on a `canvas`-pixel square.
    pub fn benchmark_with_canvas(seed: u64, canvas: usize) -> Result<Self> {
        use ShapeKind::*;
        SceneConfig::from_objects(
            &[
                ("red", Disk, true),
                ("red", Stripes, true),
                ("green", Disk, true),
                ("green", Checker, true),
                ("blue", Stripes, true),
                ("blue", Checker, true),
                ("yellow", Disk, true),
                ("yellow", Stripes, true),
                ("yellow", Checker, true),
                ("red", Checker, false),
                ("green", Stripes, false),
                ("blue", Disk, false),
            ],
            canvas,
            seed,
        )
    }

    pub fn split(&self) -> ClassSplit {
        ClassSplit {
            names: self.classes.iter().map(|c| c.name.clone()).collect(),
            seen: self.seen.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() != self.seen.len() {
            return Err(Error::invalid("classes and seen flags differ in length"));
        }
        if self.classes.first().map(|c| c.shape) != Some(ShapeKind::Background) || !self.seen[0] {
            return Err(Error::invalid("class 0 must be a seen background"));
        }
        let n_seen = self.seen.iter().filter(|&&s| s).count();
        if n_seen < 2 || n_seen == self.classes.len() {
            return Err(Error::invalid("need at least 2 seen and 1 unseen classes"));
        }
        for (i, a) in self.classes.iter().enumerate() {
            for b in &self.classes[i + 1..] {
                if a.name == b.name || (a.shape == b.shape && a.color == b.color) {
                    return Err(Error::invalid(format!(
                        "classes {:?} and {:?} share a signature",
                        a.name, b.name
                    )));
                }
            }
        }
        for (c, &s) in self.classes.iter().zip(&self.seen) {
            if !s && !self.classes.iter().zip(&self.seen).any(|(o, &os)| os && o.shape == c.shape) {
                return Err(Error::invalid(format!(
                    "unseen class {:?} shares no shape kind with a seen class",
                    c.name
                )));
            }
        }
        if self.objects.0 > self.objects.1 || self.radius.0 > self.radius.1 || self.radius.0 <= 0.0 {
            return Err(Error::invalid("empty object or radius range"));
        }
        if 2.0 * self.radius.1 + 2.0 > self.canvas as f64 {
            return Err(Error::Geometry(format!(
                "canvas {} too small for radius {}",
                self.canvas, self.radius.1
            )));
        }
        Ok(())
    }

    /// Stable digest of the serialized config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Per-pixel class indices (row-major) or [`IGNORE`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u16>,
}

impl LabelMap {
    pub fn filled(height: usize, width: usize, value: u16) -> Self {
        LabelMap {
            height,
            width,
            labels: vec![value; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u16 {
        self.labels[y * self.width + x]
    }

    /// Samples the center pixel of each `patch×patch` cell.
    pub fn downsample(&self, patch: usize) -> Result<Vec<u16>> {
        if patch == 0 || !self.height.is_multiple_of(patch) || !self.width.is_multiple_of(patch) {
            return Err(Error::Geometry(format!(
                "label map {}x{} not divisible by patch {patch}",
                self.height, self.width
            )));
        }
        let (gh, gw) = (self.height / patch, self.width / patch);
        let mut out = Vec::with_capacity(gh * gw);
        for gy in 0..gh {
            for gx in 0..gw {
                out.push(self.get(gy * patch + patch / 2, gx * patch + patch / 2));
            }
        }
        Ok(out)
    }

    pub fn histogram(&self) -> std::collections::BTreeMap<u16, usize> {
        let mut h = std::collections::BTreeMap::new();
        for &l in &self.labels {
            *h.entry(l).or_insert(0) += 1;
        }
        h
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self
            .labels
            .iter()
            .map(|&l| if l == IGNORE { -1.0 } else { l as f64 })
            .collect();
        Tensor::new(vec![self.height, self.width], data).expect("label extents")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = t.dims2()?;
        let labels = t
            .data()
            .iter()
            .map(|&v| {
                if v == -1.0 {
                    Ok(IGNORE)
                } else if v >= 0.0 && v < IGNORE as f64 && v.fract() == 0.0 {
                    Ok(v as u16)
                } else {
                    Err(Error::invalid(format!("bad label value {v}")))
                }
            })
            .collect::<Result<_>>()?;
        Ok(LabelMap {
            height: h,
            width: w,
            labels,
        })
    }
}

/// Nearest-neighbor upsampling of a token grid to pixels.
pub fn upsample_tokens(tokens: &[u16], grid: usize, patch: usize) -> LabelMap {
    let side = grid * patch;
    let mut labels = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            labels.push(tokens[(y / patch) * grid + x / patch]);
        }
    }
    LabelMap {
        height: side,
        width: side,
        labels,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    /// `H×W×3`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: LabelMap,
    /// Classes with at least one labeled pixel, ascending.
    pub present: Vec<usize>,
}

impl SceneSample {
    fn refresh_present(&mut self) {
        let mut p: Vec<usize> = self
            .label
            .labels
            .iter()
            .filter(|&&l| l != IGNORE)
            .map(|&l| l as usize)
            .collect();
        p.sort_unstable();
        p.dedup();
        self.present = p;
    }

    pub fn with_label(image: Tensor, label: LabelMap) -> Self {
        let mut s = SceneSample {
            image,
            label,
            present: Vec::new(),
        };
        s.refresh_present();
        s
    }
}

/// Seed for sample `index`, independent of generation order.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// A placed object: class, center `(cy, cx)` and radius.
#[derive(Debug, Clone, Copy)]
pub struct Placement {
    pub class: usize,
    pub center: (f64, f64),
    pub radius: f64,
}

/// Renders placements in order (later ones occlude earlier ones) over a
/// background, then adds pixel noise drawn from `rng`.
pub fn render<R: Rng + ?Sized>(
    config: &SceneConfig,
    placements: &[Placement],
    rng: &mut R,
) -> SceneSample {
    let n = config.canvas;
    let bg = config.classes[0].color;
    let mut img = vec![0.0; n * n * 3];
    let mut label = LabelMap::filled(n, n, 0);
    for y in 0..n {
        for x in 0..n {
            img[(y * n + x) * 3..(y * n + x) * 3 + 3].copy_from_slice(&bg);
        }
    }
    for p in placements {
        let spec = &config.classes[p.class];
        let (cy, cx) = p.center;
        let y0 = (cy - p.radius - 1.0).floor().max(0.0) as usize;
        let y1 = ((cy + p.radius + 1.0).ceil() as usize).min(n);
        let x0 = (cx - p.radius - 1.0).floor().max(0.0) as usize;
        let x1 = ((cx + p.radius + 1.0).ceil() as usize).min(n);
        for y in y0..y1 {
            for x in x0..x1 {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                if spec.shape.contains(dy, dx, p.radius) {
                    let s = spec.shape.shade(y, x);
                    for c in 0..3 {
                        img[(y * n + x) * 3 + c] = spec.color[c] * s;
                    }
                    label.labels[y * n + x] = p.class as u16;
                }
            }
        }
    }
    if config.noise > 0.0 {
        for v in img.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v = (*v + config.noise * e).clamp(0.0, 1.0);
        }
    }
    let image = Tensor::new(vec![n, n, 3], img).expect("image extents");
    SceneSample::with_label(image, label)
}

fn sample_scene(config: &SceneConfig, index: u64) -> SceneSample {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "scene", index));
    let count = rng.gen_range(config.objects.0..=config.objects.1);
    let n = config.canvas as f64;
    let placements: Vec<Placement> = (0..count)
        .map(|_| {
            let class = rng.gen_range(1..config.classes.len());
            let radius = if config.radius.0 < config.radius.1 {
                rng.gen_range(config.radius.0..config.radius.1)
            } else {
                config.radius.0
            };
            let cy = rng.gen_range(radius..n - radius);
            let cx = rng.gen_range(radius..n - radius);
            Placement {
                class,
                center: (cy, cx),
                radius,
            }
        })
        .collect();
    render(config, &placements, &mut rng)
}

/// `count` scenes, deterministic in `(config, index)`.
pub fn generate(config: &SceneConfig, count: usize) -> Result<Vec<SceneSample>> {
    generate_range(config, 0, count)
}

/// Scenes `start..start+count`; any split of a range yields the same samples.
pub fn generate_range(config: &SceneConfig, start: usize, count: usize) -> Result<Vec<SceneSample>> {
    config.validate()?;
    Ok((start..start + count)
        .map(|i| sample_scene(config, i as u64))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_count_is_empty() {
        assert!(generate(&SceneConfig::benchmark(0), 0).unwrap().is_empty());
    }

    #[test]
    fn deterministic_and_order_independent() {
        let cfg = SceneConfig::benchmark(5);
        let a = generate(&cfg, 6).unwrap();
        let b = generate(&cfg, 6).unwrap();
        assert_eq!(a, b);
        let mut parts = generate_range(&cfg, 3, 3).unwrap();
        let mut head = generate_range(&cfg, 0, 3).unwrap();
        head.append(&mut parts);
        assert_eq!(head, a);
    }

    #[test]
    fn labels_stay_in_config_and_background_is_zero() {
        let cfg = SceneConfig::benchmark(1);
        for s in generate(&cfg, 10).unwrap() {
            assert!(s.label.labels.iter().all(|&l| (l as usize) < cfg.classes.len()));
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(s.image.shape(), &[32, 32, 3]);
        }
    }

    #[test]
    fn disk_area_matches_pixel_count_oracle() {
        use ShapeKind::*;
        let mut cfg = SceneConfig::from_objects(
            &[
                ("green", Square, true),
                ("blue", Ring, true),
                ("red", Disk, true),
                ("red", Square, false),
            ],
            32,
            0,
        )
        .unwrap();
        cfg.noise = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for &(r, cy, cx) in &[(5.0, 16.0, 16.0), (6.5, 15.3, 16.7), (7.0, 12.0, 20.0), (9.0, 16.0, 16.0)] {
            let placement = Placement {
                class: 3,
                center: (cy, cx),
                radius: r,
            };
            let h = render(&cfg, &[placement], &mut rng).label.histogram();
            let area = h[&3] as f64;
            assert_eq!(h[&0] + h[&3], 32 * 32);
            assert!((area - std::f64::consts::PI * r * r).abs() <= 4.0, "r={r} area={area}");
        }
    }

    #[test]
    fn later_objects_occlude() {
        let mut cfg = SceneConfig::benchmark(0);
        cfg.noise = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = |class, radius| Placement {
            class,
            center: (16.0, 16.0),
            radius,
        };
        let s = render(&cfg, &[p(1, 6.0), p(5, 8.0)], &mut rng);
        assert_eq!(s.label.get(16, 16), 5);
        assert_eq!(s.present, vec![0, 5]);
    }

    #[test]
    fn rejects_tiny_canvas_and_bad_splits() {
        let mut cfg = SceneConfig::benchmark(0);
        cfg.canvas = 10;
        assert!(matches!(cfg.validate(), Err(Error::Geometry(_))));
        let mut cfg = SceneConfig::benchmark(0);
        cfg.seen = vec![true; cfg.classes.len()];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn downsample_and_upsample() {
        let mut m = LabelMap::filled(8, 8, 0);
        m.labels[2 * 8 + 2] = 4; // center of the (0,0) cell for patch 4
        let d = m.downsample(4).unwrap();
        assert_eq!(d, vec![4, 0, 0, 0]);
        let up = upsample_tokens(&d, 2, 4);
        assert_eq!(up.histogram()[&4], 16);
        assert!(m.downsample(3).is_err());
    }

    #[test]
    fn label_tensor_round_trip() {
        let mut m = LabelMap::filled(2, 3, 1);
        m.labels[4] = IGNORE;
        assert_eq!(LabelMap::from_tensor(&m.to_tensor()).unwrap(), m);
    }
}

//! Synthetic multi-scale detection scenes: flat-colored squares, disks, and
//! triangles on a noisy background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{BBox, GtObject};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 3] = ["square", "disk", "triangle"];

/// Object-size bins by longest side: small `(0, 8]`, medium `(8, 32]`, large `(32, ∞)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeBin {
    Small,
    Medium,
    Large,
}

impl SizeBin {
    pub const ALL: [SizeBin; 3] = [SizeBin::Small, SizeBin::Medium, SizeBin::Large];
    pub const SMALL_MAX: f64 = 8.0;
    pub const MEDIUM_MAX: f64 = 32.0;

    pub fn of(bbox: &BBox) -> SizeBin {
        let s = bbox.max_side();
        if s <= Self::SMALL_MAX {
            SizeBin::Small
        } else if s <= Self::MEDIUM_MAX {
            SizeBin::Medium
        } else {
            SizeBin::Large
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SizeBin::Small => "small",
            SizeBin::Medium => "medium",
            SizeBin::Large => "large",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Smallest object side; also the smallest side that still covers a
    /// stride-4 cell center.
    pub min_side: usize,
    pub max_side: usize,
    /// Largest allowed overlap between two objects, as a fraction of the
    /// smaller one's area.
    pub max_overlap: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_size: 64,
            min_objects: 1,
            max_objects: 4,
            min_side: 4,
            max_side: 56,
            max_overlap: 0.25,
            noise: 0.15,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn num_classes(&self) -> usize {
        CLASS_NAMES.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("scene: {m}")));
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad(format!(
                "object count range {}..={} is empty",
                self.min_objects, self.max_objects
            ));
        }
        if self.min_side < 2 || self.min_side > SizeBin::SMALL_MAX as usize {
            return bad(format!("min_side {} must be in 2..=8", self.min_side));
        }
        if self.max_side > self.image_size {
            return bad(format!(
                "max_side {} larger than the image ({})",
                self.max_side, self.image_size
            ));
        }
        if self.max_side <= SizeBin::MEDIUM_MAX as usize {
            return bad(format!(
                "max_side {} leaves the large bin empty",
                self.max_side
            ));
        }
        if !(0.0..=1.0).contains(&self.max_overlap) || !(0.0..=1.0).contains(&self.noise) {
            return bad("max_overlap and noise must lie in [0, 1]".into());
        }
        Ok(())
    }

    fn side_range(&self, bin: SizeBin) -> (usize, usize) {
        match bin {
            SizeBin::Small => (self.min_side, SizeBin::SMALL_MAX as usize),
            SizeBin::Medium => (
                SizeBin::SMALL_MAX as usize + 1,
                SizeBin::MEDIUM_MAX as usize,
            ),
            SizeBin::Large => (SizeBin::MEDIUM_MAX as usize + 1, self.max_side),
        }
    }
}

/// An image (`3×S×S`) with its annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Tensor,
    pub objects: Vec<GtObject>,
}

fn overlap_fraction(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    w * h / a.area().min(b.area())
}

fn covers(class: usize, b: &BBox, px: f64, py: f64) -> bool {
    match class {
        0 => b.contains(px, py),
        1 => {
            let (cx, cy) = ((b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0);
            let r = b.width() / 2.0;
            (px - cx).powi(2) + (py - cy).powi(2) <= r * r
        }
        _ => {
            // apex at the top center, base along the bottom edge
            if !b.contains(px, py) {
                return false;
            }
            let cx = (b.x1 + b.x2) / 2.0;
            let half = (py - b.y1) / b.height() * b.width() / 2.0;
            (px - cx).abs() <= half + 0.5
        }
    }
}

/// Scene `index` of the dataset described by `spec`; a pure function of
/// `(spec, index)`.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let s = spec.image_size;
    let count = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut sides: Vec<usize> = (0..count)
        .map(|_| {
            let bin = SizeBin::ALL[rng.random_range(0..3)];
            let (lo, hi) = spec.side_range(bin);
            rng.random_range(lo..=hi)
        })
        .collect();
    // large objects first so that small ones are painted on top
    sides.sort_unstable_by(|a, b| b.cmp(a));

    let mut objects: Vec<GtObject> = Vec::with_capacity(count);
    let mut colors: Vec<[f64; 3]> = Vec::with_capacity(count);
    for side in sides {
        for _ in 0..50 {
            let x1 = rng.random_range(0..=s - side) as f64;
            let y1 = rng.random_range(0..=s - side) as f64;
            let bbox = BBox::new(x1, y1, x1 + side as f64, y1 + side as f64);
            if objects
                .iter()
                .all(|o| overlap_fraction(&o.bbox, &bbox) <= spec.max_overlap)
            {
                let class = rng.random_range(0..CLASS_NAMES.len());
                objects.push(GtObject { bbox, class });
                colors.push([
                    rng.random_range(0.45..1.0),
                    rng.random_range(0.45..1.0),
                    rng.random_range(0.45..1.0),
                ]);
                break;
            }
        }
    }

    let mut data = vec![0.0; 3 * s * s];
    for v in data.iter_mut() {
        *v = rng.random::<f64>() * spec.noise;
    }
    for (o, color) in objects.iter().zip(&colors) {
        let b = o.bbox;
        for y in b.y1 as usize..b.y2 as usize {
            for x in b.x1 as usize..b.x2 as usize {
                if covers(o.class, &b, x as f64 + 0.5, y as f64 + 0.5) {
                    for (c, &col) in color.iter().enumerate() {
                        data[(c * s + y) * s + x] = col;
                    }
                }
            }
        }
    }
    Ok(Scene {
        image: Tensor::new([3, s, s], data)?,
        objects,
    })
}

/// Mirrors a scene left to right.
pub fn flip_scene(scene: &Scene) -> Scene {
    let s = scene.image.shape()[2];
    let src = scene.image.data();
    let mut data = vec![0.0; src.len()];
    for row in 0..src.len() / s {
        for x in 0..s {
            data[row * s + x] = src[row * s + s - 1 - x];
        }
    }
    Scene {
        image: Tensor::new(scene.image.shape().to_vec(), data).expect("same shape"),
        objects: scene
            .objects
            .iter()
            .map(|o| GtObject {
                bbox: o.bbox.flipped(s as f64),
                class: o.class,
            })
            .collect(),
    }
}

/// Stacks scenes into an `N×3×S×S` batch.
pub fn stack_batch(scenes: &[Scene]) -> Result<(Tensor, Vec<Vec<GtObject>>)> {
    let first = scenes
        .first()
        .ok_or_else(|| Error::invalid("stack_batch", "empty batch"))?;
    let shape = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(scenes.len() * first.image.numel());
    for sc in scenes {
        if sc.image.shape() != shape.as_slice() {
            return Err(Error::shape("stack_batch", sc.image.shape(), &shape));
        }
        data.extend_from_slice(sc.image.data());
    }
    let mut full = vec![scenes.len()];
    full.extend(shape);
    Ok((
        Tensor::new(full, data)?,
        scenes.iter().map(|s| s.objects.clone()).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_index() {
        let spec = SceneSpec::default();
        assert_eq!(
            generate_scene(&spec, 7).unwrap(),
            generate_scene(&spec, 7).unwrap()
        );
        assert_ne!(
            generate_scene(&spec, 7).unwrap(),
            generate_scene(&spec, 8).unwrap()
        );
        let other = SceneSpec {
            seed: 1,
            ..spec.clone()
        };
        assert_ne!(
            generate_scene(&spec, 7).unwrap(),
            generate_scene(&other, 7).unwrap()
        );
    }

    #[test]
    fn objects_inside_image_and_counted() {
        let spec = SceneSpec::default();
        for i in 0..1000 {
            let sc = generate_scene(&spec, i).unwrap();
            assert!((spec.min_objects..=spec.max_objects).contains(&sc.objects.len()));
            for o in &sc.objects {
                let b = o.bbox;
                assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 64.0 && b.y2 <= 64.0);
                assert!(b.width() >= spec.min_side as f64);
                assert!(o.class < 3);
            }
        }
    }

    #[test]
    fn all_bins_populated() {
        let spec = SceneSpec::default();
        let mut counts = [0usize; 3];
        for i in 0..512 {
            for o in generate_scene(&spec, i).unwrap().objects {
                counts[SizeBin::of(&o.bbox) as usize] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        for c in counts {
            assert!(c as f64 >= 0.25 * total as f64, "{counts:?}");
        }
    }

    #[test]
    fn square_raster_matches_box() {
        let b = BBox::new(10.0, 12.0, 30.0, 32.0);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for y in 0..64 {
            for x in 0..64 {
                if covers(0, &b, x as f64 + 0.5, y as f64 + 0.5) {
                    xs.push(x);
                    ys.push(y);
                }
            }
        }
        let w = xs.iter().max().unwrap() - xs.iter().min().unwrap() + 1;
        let h = ys.iter().max().unwrap() - ys.iter().min().unwrap() + 1;
        assert_eq!((w, h, xs.len()), (20, 20, 400));
    }

    #[test]
    fn flip_is_an_involution() {
        let sc = generate_scene(&SceneSpec::default(), 3).unwrap();
        assert_eq!(flip_scene(&flip_scene(&sc)), sc);
        assert_ne!(flip_scene(&sc).image, sc.image);
    }

    #[test]
    fn impossible_specs_rejected() {
        let big = SceneSpec {
            max_side: 80,
            ..SceneSpec::default()
        };
        assert!(generate_scene(&big, 0).is_err());
        let empty = SceneSpec {
            min_objects: 3,
            max_objects: 2,
            ..SceneSpec::default()
        };
        assert!(empty.validate().is_err());
    }

    #[test]
    fn batch_stacking() {
        let spec = SceneSpec::default();
        let scenes: Vec<Scene> = (0..3).map(|i| generate_scene(&spec, i).unwrap()).collect();
        let (t, objs) = stack_batch(&scenes).unwrap();
        assert_eq!(t.shape(), &[3, 3, 64, 64]);
        assert_eq!(&t.data()[2 * 3 * 4096..], scenes[2].image.data());
        assert_eq!(objs.len(), 3);
    }
}

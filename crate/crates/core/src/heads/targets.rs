use crate::boxes::GtObject;
use crate::error::{Error, Result};

/// Object-size ranges per level: level `l` owns objects whose longest side `s`
/// satisfies `lo < s ≤ hi`. Ranges are sorted by level and tile `(0, ∞)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelRanges {
    ranges: Vec<(usize, f64, f64)>,
}

impl LevelRanges {
    pub fn new(ranges: Vec<(usize, f64, f64)>) -> Result<Self> {
        let op = "level_ranges";
        let first = ranges
            .first()
            .ok_or_else(|| Error::invalid(op, "no ranges"))?;
        if first.1 != 0.0 {
            return Err(Error::invalid(
                op,
                format!("ranges must start at 0, got {}", first.1),
            ));
        }
        for (i, &(level, lo, hi)) in ranges.iter().enumerate() {
            if lo.is_nan() || hi.is_nan() || hi <= lo {
                return Err(Error::invalid(
                    op,
                    format!("empty range ({lo}, {hi}] for level {level}"),
                ));
            }
            if let Some(&(next_level, next_lo, _)) = ranges.get(i + 1) {
                if next_level <= level {
                    return Err(Error::invalid(op, "levels must be strictly increasing"));
                }
                if next_lo < hi {
                    return Err(Error::invalid(
                        op,
                        format!("ranges overlap at {next_lo} < {hi}"),
                    ));
                }
                if next_lo > hi {
                    return Err(Error::invalid(
                        op,
                        format!("gap between {hi} and {next_lo}"),
                    ));
                }
            } else if hi != f64::INFINITY {
                return Err(Error::invalid(
                    op,
                    format!("last range must end at infinity, got {hi}"),
                ));
            }
        }
        Ok(LevelRanges { ranges })
    }

    /// Consecutive levels split at `boundaries`; needs `boundaries.len() + 1` levels.
    pub fn from_boundaries(levels: &[usize], boundaries: &[f64]) -> Result<Self> {
        if levels.len() != boundaries.len() + 1 {
            return Err(Error::invalid(
                "level_ranges",
                format!(
                    "{} levels need {} boundaries, got {}",
                    levels.len(),
                    levels.len() - 1,
                    boundaries.len()
                ),
            ));
        }
        let mut ranges = Vec::with_capacity(levels.len());
        let mut lo = 0.0;
        for (i, &l) in levels.iter().enumerate() {
            let hi = boundaries.get(i).copied().unwrap_or(f64::INFINITY);
            ranges.push((l, lo, hi));
            lo = hi;
        }
        Self::new(ranges)
    }

    /// A single level responsible for every object.
    pub fn single(level: usize) -> Self {
        LevelRanges {
            ranges: vec![(level, 0.0, f64::INFINITY)],
        }
    }

    pub fn level_for(&self, side: f64) -> Option<usize> {
        self.ranges
            .iter()
            .find(|&&(_, lo, hi)| side > lo && side <= hi)
            .map(|&(l, _, _)| l)
    }

    pub fn levels(&self) -> Vec<usize> {
        self.ranges.iter().map(|r| r.0).collect()
    }

    pub fn ranges(&self) -> &[(usize, f64, f64)] {
        &self.ranges
    }
}

/// Dense targets for one level over a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelTargets {
    pub level: usize,
    pub stride: f64,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    /// Class of the object each cell regresses, or `None` for background.
    /// Indexed `(n·h + y)·w + x`.
    pub labels: Vec<Option<usize>>,
    /// Distances `(left, top, right, bottom)` in input pixels; zero on background cells.
    pub distances: Vec<[f64; 4]>,
    /// Index of the object within its image for every positive cell.
    pub owners: Vec<Option<usize>>,
}

impl LevelTargets {
    pub fn num_positives(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }

    pub fn cells(&self) -> usize {
        self.batch * self.height * self.width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetAssignment {
    pub levels: Vec<LevelTargets>,
    /// Level chosen for every object, per image.
    pub object_levels: Vec<Vec<usize>>,
}

impl TargetAssignment {
    pub fn level(&self, level: usize) -> Option<&LevelTargets> {
        self.levels.iter().find(|t| t.level == level)
    }

    pub fn total_positives(&self) -> usize {
        self.levels.iter().map(LevelTargets::num_positives).sum()
    }
}

/// Assigns every object to exactly one level by its longest side, then marks as
/// positive every cell of that level whose center lies inside the box. A cell
/// covered by several boxes of its level regresses the smallest one.
///
/// `grids` lists `(level, height, width)`; the stride is `2^level`.
pub fn assign_targets(
    objects: &[Vec<GtObject>],
    grids: &[(usize, usize, usize)],
    ranges: &LevelRanges,
) -> Result<TargetAssignment> {
    for l in ranges.levels() {
        if !grids.iter().any(|g| g.0 == l) {
            return Err(Error::invalid(
                "assign_targets",
                format!("no feature grid for level {l}"),
            ));
        }
    }
    let batch = objects.len();
    let mut levels: Vec<LevelTargets> = grids
        .iter()
        .map(|&(level, height, width)| {
            let cells = batch * height * width;
            LevelTargets {
                level,
                stride: (1u64 << level) as f64,
                batch,
                height,
                width,
                labels: vec![None; cells],
                distances: vec![[0.0; 4]; cells],
                owners: vec![None; cells],
            }
        })
        .collect();
    let mut object_levels = Vec::with_capacity(batch);
    for (n, image_objects) in objects.iter().enumerate() {
        let mut chosen = Vec::with_capacity(image_objects.len());
        // area of the box currently owning each cell
        let mut owner_area: Vec<Vec<f64>> = levels
            .iter()
            .map(|t| vec![f64::INFINITY; t.height * t.width])
            .collect();
        for (j, obj) in image_objects.iter().enumerate() {
            let b = obj.bbox;
            if !(b.width() > 0.0 && b.height() > 0.0) {
                return Err(Error::invalid(
                    "assign_targets",
                    format!("degenerate box {b:?}"),
                ));
            }
            let level = ranges.level_for(b.max_side()).ok_or_else(|| {
                Error::invalid(
                    "assign_targets",
                    format!("no level for side {}", b.max_side()),
                )
            })?;
            chosen.push(level);
            let li = levels
                .iter()
                .position(|t| t.level == level)
                .expect("checked above");
            let t = &mut levels[li];
            let area = b.area();
            for y in 0..t.height {
                let cy = (y as f64 + 0.5) * t.stride;
                for x in 0..t.width {
                    let cx = (x as f64 + 0.5) * t.stride;
                    if !b.contains(cx, cy) {
                        continue;
                    }
                    let local = y * t.width + x;
                    if area < owner_area[li][local] {
                        owner_area[li][local] = area;
                        let idx = n * t.height * t.width + local;
                        t.labels[idx] = Some(obj.class);
                        t.owners[idx] = Some(j);
                        t.distances[idx] = [cx - b.x1, cy - b.y1, b.x2 - cx, b.y2 - cy];
                    }
                }
            }
        }
        object_levels.push(chosen);
    }
    Ok(TargetAssignment {
        levels,
        object_levels,
    })
}
